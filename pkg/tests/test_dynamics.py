import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mflow import _kernels
from mflow import dynamics as dyn
from mflow.dynamics import FieldMode, FieldParams
from mflow.errors import ChartOverflowError, ChecksumError
from mflow.geometry import Hyperboloid, Sphere

from conftest import random_points

H, S = Hyperboloid(2), Sphere(2)
CASES = [(H, FieldMode.AMBIENT_PROJECTED), (H, FieldMode.TANGENT_DIRECT), (S, FieldMode.AMBIENT_PROJECTED)]
IDS = ["h2-ambient", "h2-direct", "s2-ambient"]


def _inputs(M, mode, n, rng):
    if mode is FieldMode.TANGENT_DIRECT:
        return rng.normal(size=(n, M.dim))
    return random_points(M, n, rng)


def test_default_architecture():
    p = FieldParams.init(S)
    assert list(p.sizes) == [4, 32, 32, 32, 3]
    assert len(p.layers()) == 4
    assert list(FieldParams.init(H, FieldMode.TANGENT_DIRECT).sizes) == [3, 32, 32, 32, 2]
    for W, b in p.layers():
        lim = math.sqrt(6 / sum(W.shape))
        assert np.abs(W).max() <= lim and not b.any()


def test_bad_params_rejected():
    with pytest.raises(ValueError):
        FieldParams.init(S, FieldMode.TANGENT_DIRECT)
    p = FieldParams.init(H)
    with pytest.raises(ValueError):
        FieldParams(p.theta[:-1], p.sizes, H)
    with pytest.raises(ValueError):
        FieldParams(p.theta, p.sizes, H, FieldMode.TANGENT_DIRECT)


@pytest.mark.parametrize("M,mode", CASES, ids=IDS)
def test_zero_weights(M, mode):
    p = FieldParams.zeros(M, mode)
    z = _inputs(M, mode, 5, np.random.default_rng(0))
    assert not dyn.field_eval(p, z, 0.3).any()
    assert not dyn.field_jacobian_z(p, z, 0.3).any()


def test_field_is_tangent():
    rng = np.random.default_rng(1)
    for M in (H, S):
        p = FieldParams.init(M, rng=rng)
        z = random_points(M, 50, rng, 1.5)
        f = dyn.field_eval(p, z, 0.7)
        assert M.tangency_error(z, f).max() < 1e-9


def _norm_bound(p, z, t):
    # |tanh u| <= |u| gives |layer(h)| <= |W| |h| + |b| layer by layer
    bound = np.linalg.norm(z, axis=-1) + abs(t)
    for W, b in p.layers():
        bound = np.linalg.norm(W, 2) * bound + np.linalg.norm(b)
    return bound


@pytest.mark.parametrize("M,mode", CASES, ids=IDS)
def test_field_norm_bound(M, mode):
    rng = np.random.default_rng(2)
    p = FieldParams.init(M, mode, rng=rng)
    p = p.with_theta(p.theta + 0.1 * rng.normal(size=p.theta.size))
    z = _inputs(M, mode, 100, rng)
    h, _ = dyn.mlp_forward(p, z, 0.4, jac=False)
    bound = _norm_bound(p, z, 0.4)
    assert np.all(np.linalg.norm(h, axis=-1) <= bound + 1e-12)
    f = dyn.field_eval(p, z, 0.4)
    if mode is FieldMode.AMBIENT_PROJECTED:
        # operator norm of the tangent projection at each point
        P = np.stack([M.proj_tangent(z, np.broadcast_to(e, z.shape)) for e in np.eye(3)], axis=-1)
        bound = bound * np.linalg.norm(P, 2, axis=(-2, -1))
    assert np.all(np.linalg.norm(f, axis=-1) <= bound + 1e-12)


@pytest.mark.parametrize("M,mode", CASES, ids=IDS)
def test_jacobian_matches_finite_differences(M, mode):
    rng = np.random.default_rng(3)
    h = 1e-5
    for _ in range(10):
        p = FieldParams.init(M, mode, rng=rng)
        z = _inputs(M, mode, 1, rng)[0]
        t = rng.uniform()
        J = dyn.field_jacobian_z(p, z, t)
        I = np.eye(z.size)
        fd = np.stack([(dyn.field_eval(p, z + h * e, t) - dyn.field_eval(p, z - h * e, t)) / (2 * h) for e in I], -1)
        np.testing.assert_allclose(J, fd, rtol=1e-6, atol=1e-9)


def test_jacobian_of_small_input_linear_regime():
    p = FieldParams.init(S, rng=4)
    x = np.full((1, 3), 1e-6)
    _, J = dyn.mlp_forward(p, x, 1e-6)
    Wprod = np.eye(4)
    for W, _ in p.layers():
        Wprod = W @ Wprod
    np.testing.assert_allclose(J[0], Wprod[:, :3], atol=1e-8)


@pytest.mark.parametrize("M,mode", CASES, ids=IDS)
def test_vjp_params_matches_finite_differences(M, mode):
    rng = np.random.default_rng(5)
    p = FieldParams.init(M, mode, rng=rng)
    z = _inputs(M, mode, 3, rng)
    c = rng.normal(size=(3, p.out_width))
    g = dyn.field_vjp_params(p, z, 0.2, c)
    start = 0
    for W, b in p.layers():
        for k in (start, start + W.size // 2, start + W.size):
            e = np.zeros_like(p.theta)
            e[k] = 1e-5
            fd = (np.sum(c * dyn.field_eval(p.with_theta(p.theta + e), z, 0.2))
                  - np.sum(c * dyn.field_eval(p.with_theta(p.theta - e), z, 0.2))) / 2e-5
            assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)
        start += W.size + b.size


@pytest.mark.parametrize("M,mode", CASES, ids=IDS)
def test_vjp_params_trivial_cases(M, mode):
    rng = np.random.default_rng(6)
    p = FieldParams.init(M, mode, rng=rng)
    z = _inputs(M, mode, 4, rng)
    assert not dyn.field_vjp_params(p, z, 0.5, np.zeros((4, p.out_width))).any()
    c = rng.normal(size=(4, p.out_width))
    if mode is FieldMode.AMBIENT_PROJECTED:
        c = M.proj_tangent(z, c)
    g = dyn.field_vjp_params(p, z, 0.5, c)
    c_eff = c if mode is FieldMode.TANGENT_DIRECT else c - M.kappa * np.sum(c * z, -1)[:, None] * M.lower(z)
    np.testing.assert_allclose(g[-p.out_width:], c_eff.sum(axis=0), atol=1e-13)


def test_divergence_matches_chart_trace():
    rng = np.random.default_rng(7)
    h = 1e-5
    for M in (H, S):
        p = FieldParams.init(M, rng=rng)
        z = random_points(M, 4, rng)
        E = M.frame(z)
        y0 = np.zeros((4, 2))
        tr = sum(
            (dyn.chart_eval(p, z, E, y0 + h * e, 0.3).ghat[:, k] - dyn.chart_eval(p, z, E, y0 - h * e, 0.3).ghat[:, k]) / (2 * h)
            for k, e in enumerate(np.eye(2))
        )
        np.testing.assert_allclose(dyn.field_divergence(p, z, 0.3), tr, atol=1e-5)


@pytest.mark.parametrize("M,mode", CASES, ids=IDS)
def test_chart_trace_and_vjp(M, mode):
    rng = np.random.default_rng(8)
    p = FieldParams.init(M, mode, rng=rng, scale=1.5)
    n = 4
    x = M.origin_like((n,)) if mode is FieldMode.TANGENT_DIRECT else random_points(M, n, rng)
    E = M.frame(x)
    y = rng.normal(size=(n, 2)) * 0.8
    t, h = 0.37, 1e-6
    ev = dyn.chart_eval(p, x, E, y, t)
    tr = sum(
        (dyn.chart_eval(p, x, E, y + h * e, t).ghat[:, k] - dyn.chart_eval(p, x, E, y - h * e, t).ghat[:, k]) / (2 * h)
        for k, e in enumerate(np.eye(2))
    )
    np.testing.assert_allclose(ev.trace, tr, atol=1e-6)
    a = rng.normal(size=(n, 2))
    w = rng.normal(size=n)
    gy, gth = dyn.chart_vjp(p, x, E, y, t, a, w)

    def J(yy, pp):
        e = dyn.chart_eval(pp, x, E, yy, t)
        return np.sum(a * e.ghat) + np.sum(w * e.trace)

    for i in range(n):
        for k in range(2):
            d = np.zeros_like(y)
            d[i, k] = h
            assert gy[i, k] == pytest.approx((J(y + d, p) - J(y - d, p)) / (2 * h), rel=1e-5, abs=1e-7)
    for k in rng.choice(p.theta.size, 6, replace=False):
        d = np.zeros_like(p.theta)
        d[k] = h
        fd = (J(y, p.with_theta(p.theta + d)) - J(y, p.with_theta(p.theta - d))) / (2 * h)
        assert gth[k] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_ambient_vjp_matches_finite_differences():
    rng = np.random.default_rng(9)
    for M in (H, S):
        p = FieldParams.init(M, rng=rng)
        z = random_points(M, 3, rng) + 0.01 * rng.normal(size=(3, 3))
        a = rng.normal(size=(3, 3))
        w = rng.normal(size=3)
        gz, _ = dyn.ambient_vjp(p, z, 0.6, a, w)
        K = lambda zz: np.sum(a * dyn.field_eval(p, zz, 0.6)) + np.sum(w * dyn.field_divergence(p, zz, 0.6))
        h = 1e-6
        for i in range(3):
            for k in range(3):
                d = np.zeros_like(z)
                d[i, k] = h
                assert gz[i, k] == pytest.approx((K(z + d) - K(z - d)) / (2 * h), rel=1e-5, abs=1e-7)


def test_pullback_then_pushforward():
    rng = np.random.default_rng(10)
    for M in (H, S):
        p = FieldParams.init(M, rng=rng)
        x = random_points(M, 5, rng)
        E = M.frame(x)
        y = rng.normal(size=(5, 2)) * 0.9
        g = dyn.chart_pullback_dynamics(p, x, E, y, 0.1)
        z = M.chart(x, E, y)
        push = np.einsum("ndi,ni->nd", M.chart_jacobian(x, E, y), g)
        np.testing.assert_allclose(push, dyn.field_eval(p, z, 0.1), atol=1e-8)
        if M is S:
            # the sphere pullback is the log-map Jacobian applied to f
            lf = np.einsum("nij,nj->ni", M.log_jacobian(x, z), dyn.field_eval(p, z, 0.1))
            np.testing.assert_allclose(M.coords(E, lf), g, atol=1e-8)


def test_pullback_zero_field_and_overflow():
    x = S.origin
    E = S.frame(x)
    p = FieldParams.zeros(S)
    assert not dyn.chart_pullback_dynamics(p, x, E, np.array([0.3, -1.0]), 0.0).any()
    y = np.array([(1 - 1e-6) * math.pi, 0.0])
    with pytest.raises(ChartOverflowError) as info:
        dyn.chart_pullback_dynamics(p, x, E, y, 0.0)
    assert info.value.mask is not None and info.value.mask.all()


def test_tangent_direct_pullback_is_network_output():
    p = FieldParams.init(H, FieldMode.TANGENT_DIRECT, rng=11)
    y = np.array([[0.3, -2.0]])
    out, _ = dyn.mlp_forward(p, y, 0.5, jac=False)
    np.testing.assert_array_equal(dyn.chart_pullback_dynamics(p, H.origin_like((1,)), H.frame(H.origin_like((1,))), y, 0.5), out)


def test_clip_speed():
    v = np.array([[3.0, 4.0], [0.3, 0.4]])
    np.testing.assert_allclose(dyn.clip_speed(v, 1.0), [[0.6, 0.8], [0.3, 0.4]])
    assert dyn.clip_speed(v, None) is v


def test_lipschitz_estimate_stable():
    p = FieldParams.init(H, rng=12)
    est = []
    for n in (200, 800):
        c = random_points(H, n, np.random.default_rng(0), 0.7)
        f = dyn.field_eval(p, c, 0.5)
        df = np.linalg.norm(f[:, None] - f[None], axis=-1)
        dz = np.linalg.norm(c[:, None] - c[None], axis=-1)
        np.fill_diagonal(dz, np.inf)
        est.append(np.max(df / dz))
    assert np.all(np.isfinite(est)) and est[1] <= 1.5 * est[0]


def test_checkpoint_round_trip(tmp_path):
    p = FieldParams.init(H, FieldMode.TANGENT_DIRECT, rng=13)
    path = tmp_path / "p.bin"
    dyn.save_params(path, p)
    q = dyn.load_params(path)
    assert q.theta.tobytes() == p.theta.tobytes()
    assert q.mode is p.mode and list(q.sizes) == list(p.sizes) and q.manifold == p.manifold
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        dyn.load_params(path)


@pytest.mark.skipif("compiled" not in _kernels.available_backends(), reason="compiled kernels not built")
@given(n=st.integers(1, 150), seed=st.integers(0, 10_000), jac=st.booleans())
def test_compiled_kernel_matches_python(n, seed, jac):
    rng = np.random.default_rng(seed)
    p = FieldParams.init(S, rng=rng)
    x = rng.normal(size=(n, 3))
    t = float(rng.uniform())
    cp, py = _kernels.available_backends()["compiled"], _kernels.mlp_py
    o1, J1 = cp.forward(p.theta, p.sizes, x, t, jac)
    o2, J2 = py.forward(p.theta, p.sizes, x, t, jac)
    np.testing.assert_allclose(o1, o2, rtol=1e-12, atol=1e-13)
    if jac:
        np.testing.assert_allclose(J1, J2, rtol=1e-12, atol=1e-13)
    go = rng.normal(size=(n, 3))
    gj = rng.normal(size=(n, 3, 3)) if jac else None
    g1, x1 = cp.backward(p.theta, p.sizes, x, t, go, gj)
    g2, x2 = py.backward(p.theta, p.sizes, x, t, go, gj)
    np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-11)
    np.testing.assert_allclose(x1, x2, rtol=1e-10, atol=1e-11)


def test_thread_count_does_not_change_results():
    with pytest.raises(ValueError):
        _kernels.set_num_threads(0)
    p = FieldParams.init(S, rng=14)
    x = np.random.default_rng(14).normal(size=(300, 3))
    outs = []
    for n in (1, 3):
        _kernels.set_num_threads(n)
        outs.append(dyn.mlp_forward(p, x, 0.2))
    _kernels.set_num_threads(1)
    assert outs[0][0].tobytes() == outs[1][0].tobytes()
    assert outs[0][1].tobytes() == outs[1][1].tobytes()
