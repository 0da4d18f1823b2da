import numpy as np
import pytest

from mflow import flow
from mflow.distributions import default_base, target_from_name
from mflow.dynamics import FieldMode, FieldParams, mlp_forward
from mflow.errors import ChecksumError, DomainError
from mflow.flow import FlowModel, mcnf_logprob, mcnf_sample, nll_and_grad
from mflow.geometry import Hyperboloid, Sphere
from mflow.quadrature import integrate_density
from mflow.solvers import ChartPolicy, TimeGrid, rk4_integrate

from conftest import random_points

H, S = Hyperboloid(2), Sphere(2)
MS = [H, S]
IDS = ["h2", "s2"]
QUAD = {H: dict(n_r=150, n_phi=150), S: dict(n_theta=100, n_phi=200)}


def test_defaults():
    mh, ms = FlowModel.create(H, rng=0), FlowModel.create(S, rng=0)
    assert mh.params.mode is FieldMode.TANGENT_DIRECT
    assert ms.params.mode is FieldMode.AMBIENT_PROJECTED
    assert mh.base.to_dict() == default_base(H).to_dict()
    assert mh.grid == TimeGrid() and mh.policy == ChartPolicy()
    with pytest.raises(ValueError):
        FlowModel(ms.params, default_base(H))


@pytest.mark.parametrize("M", MS, ids=IDS)
def test_identity_flow(M):
    rng = np.random.default_rng(0)
    model = FlowModel(FieldParams.zeros(M), default_base(M), TimeGrid(num_charts=3))
    x = random_points(M, 6, rng, 0.8)
    assert np.abs(mcnf_logprob(model, x) - model.base.logpdf(x)).max() <= 1e-9
    z, lp = mcnf_sample(model, 50, np.random.default_rng(1))
    np.testing.assert_allclose(z, model.base.sample(50, np.random.default_rng(1)), atol=1e-14)
    np.testing.assert_allclose(lp, model.base.logpdf(z), atol=1e-12)
    batch = model.base.sample(4000, rng)
    res = nll_and_grad(model, batch)
    assert res.nll == pytest.approx(-np.mean(model.base.logpdf(batch)), abs=1e-9)
    assert np.all(np.isfinite(res.grad))


@pytest.mark.parametrize("M", MS, ids=IDS)
@pytest.mark.parametrize("seed", [11, 12])
def test_normalization(M, seed):
    model = FlowModel.create(M, rng=seed)
    Z = integrate_density(lambda x: mcnf_logprob(model, x, allow_failures=True), M, **QUAD[M])
    assert abs(Z - 1) < 5e-3


@pytest.mark.parametrize("M", MS, ids=IDS)
def test_sample_round_trip_and_consistency(M):
    model = FlowModel.create(M, rng=3, grid=TimeGrid(num_charts=1 if M is H else 4))
    rng = np.random.default_rng(4)
    z0 = model.base.sample(8, rng)
    fwd = flow._pass(model, z0, False, False)
    back = flow._pass(model, fwd.z, True, False)
    assert np.abs(back.z - z0).max() < 1e-6
    x, lp = mcnf_sample(model, 8, np.random.default_rng(5))
    np.testing.assert_allclose(lp, mcnf_logprob(model, x), atol=1e-5)
    assert M.membership_error(x).max() < 1e-8
    with pytest.raises(ValueError):
        mcnf_sample(model, 0, rng)


def test_single_point_input():
    model = FlowModel.create(S, rng=6)
    x = random_points(S, 2, np.random.default_rng(6))
    assert mcnf_logprob(model, x[0]) == pytest.approx(mcnf_logprob(model, x)[0], abs=1e-13)


def test_hyperboloid_matches_flat_tangent_cnf():
    # independent route: integrate (y, int tr) in T_0 with plain RK4, then add
    # the exp_0 volume terms by hand
    model = FlowModel.create(H, rng=7)
    p = model.params
    x = random_points(H, 5, np.random.default_rng(7), 1.0)
    y1 = H.coords(H.frame(H.origin_like((5,))), H.log(H.origin_like((5,)), x))

    def rhs(t, s):
        y = s[:, :2]
        out, J = mlp_forward(p, y, t)
        return np.column_stack([out, np.trace(J, axis1=1, axis2=2)])

    s = rk4_integrate(rhs, np.column_stack([y1, np.zeros(5)]), 1.0, 0.0, 20)
    y0, back_tr = s[:, :2], s[:, 2]
    L = lambda y: H.logdet_exp_radius(np.linalg.norm(y, axis=-1))
    z0 = H.chart(H.origin_like((5,)), H.frame(H.origin_like((5,))), y0)
    oracle = model.base.logpdf(z0) + L(y0) + back_tr - L(y1)
    np.testing.assert_allclose(mcnf_logprob(model, x), oracle, atol=1e-5)


def test_chart_count_invariance_of_logprob():
    p = FieldParams.init(H, FieldMode.AMBIENT_PROJECTED, rng=1, scale=0.5)
    base = default_base(H)
    x = random_points(H, 4, np.random.default_rng(8), 0.7)
    lps = [mcnf_logprob(FlowModel(p, base, TimeGrid(steps_per_segment=160 // K, num_charts=K)), x) for K in (1, 2, 4, 8, 16)]
    assert max(np.abs(lp - lps[0]).max() for lp in lps) < 1e-6


@pytest.mark.parametrize("M", MS, ids=IDS)
@pytest.mark.parametrize("backend", ["chart", "ambient"])
def test_nll_gradient_finite_differences(M, backend):
    mode = FieldMode.AMBIENT_PROJECTED
    p = FieldParams.init(M, mode, rng=9, scale=0.5)
    model = FlowModel(p, default_base(M), TimeGrid(steps_per_segment=10, num_charts=2))
    batch = random_points(M, 4, np.random.default_rng(9), 0.6)
    res = nll_and_grad(model, batch, backend)
    assert res.nll == pytest.approx(-np.mean(mcnf_logprob(model, batch)), abs=1e-12)
    rng = np.random.default_rng(10)
    h = 1e-6
    for k in rng.choice(p.theta.size, 8, replace=False):
        e = np.zeros_like(p.theta)
        e[k] = h
        fd = (nll_and_grad(model.with_theta(p.theta + e), batch).nll
              - nll_and_grad(model.with_theta(p.theta - e), batch).nll) / (2 * h)
        assert res.grad[k] == pytest.approx(fd, rel=1e-3, abs=1e-7)


def test_nll_failures_are_excluded():
    p = FieldParams.zeros(S)
    theta = p.theta.copy()
    theta[-3:] = [10.0, 0.0, 0.0]
    model = FlowModel(p.with_theta(theta), default_base(S), TimeGrid(steps_per_segment=40))
    x = np.array([[1.0, 0.0, 0.0], S.exp(S.origin, np.array([0.0, 0.1, 0.0]))])
    x = S.project(x + [[0.0, 1e-3, 0.0], [0.0, 0.0, 0.0]])
    res = nll_and_grad(model, x, allow_failures=True)
    lp, failed = mcnf_logprob(model, x, allow_failures=True, return_failed=True)
    assert failed.any() and np.all(lp[failed] == -np.inf)
    assert np.array_equal(res.failed, failed)
    assert res.nll == pytest.approx(-lp[~failed].mean()) if (~failed).any() else np.isnan(res.nll)
    with pytest.raises(ValueError):
        nll_and_grad(model, np.zeros((0, 3)))


def test_save_load(tmp_path):
    model = FlowModel.create(S, base=target_from_name("c1-sph1"), rng=12,
                             grid=TimeGrid(0.0, 2.0, 7, 3), policy=ChartPolicy("adaptive", 0.2), speed_limit=5.0)
    path = tmp_path / "m.bin"
    flow.save_model(path, model)
    back = flow.load_model(path)
    assert back.params.theta.tobytes() == model.params.theta.tobytes()
    assert back.grid == model.grid and back.policy == model.policy and back.speed_limit == 5.0
    assert back.base.to_dict() == model.base.to_dict()
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        flow.load_model(path)


def test_load_rejects_field_checkpoint(tmp_path):
    from mflow.dynamics import save_params

    save_params(tmp_path / "p.bin", FieldParams.zeros(S))
    with pytest.raises(DomainError):
        flow.load_model(tmp_path / "p.bin")
