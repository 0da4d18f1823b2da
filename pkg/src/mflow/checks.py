"""Self-check suites run by ``mflow check``.

Each suite is a function ``suite(fast) -> list[CheckResult]`` covering the
invariants of one library module. ``fast`` trims case counts and quadrature
resolution so the whole run stays well under a minute.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import distributions as dist
from . import dynamics as dyn
from . import flow
from . import solvers
from .geometry import Hyperboloid, Sphere
from .quadrature import integrate_density, manifold_rule, spherical_box_rule, tangent_box_rule

MANIFOLDS = (Hyperboloid(2), Sphere(2))


@dataclass
class CheckResult:
    suite: str
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0


def _rand_points(M, n, rng, scale=1.0):
    o = M.origin_like((n,))
    return M.exp(o, M.proj_tangent(o, rng.normal(size=(n, M.ambient_dim)) * scale))


def _rand_tangent(M, x, rng, max_norm):
    u = M.proj_tangent(x, rng.normal(size=x.shape))
    u = u / M.norm(u)[..., None]
    return u * (rng.uniform(0, max_norm, size=x.shape[:-1]))[..., None]


def _max_norm(M):
    return min(0.95 * M.injectivity_radius, 3.0)


def _fd_frame_logdet(M, x, c, h=1e-6):
    """log|det| of the derivative of ``c -> exp_x(E_x c)`` in orthonormal frames."""
    E = M.frame(x)
    y = M.exp(x, E @ c)
    cols = []
    for k in range(M.dim):
        d = np.zeros(M.dim)
        d[k] = h
        cols.append((M.exp(x, E @ (c + d)) - M.exp(x, E @ (c - d))) / (2 * h))
    J = np.stack(cols, axis=-1)
    Ey = M.frame(y)
    A = Ey.T @ (M.metric_diag[:, None] * J)
    return math.log(abs(np.linalg.det(A)))


# ---------------------------------------------------------------------------
# geometry

def suite_geometry(fast=False):
    out = []
    n = 100
    rng = np.random.default_rng(11)
    for M in MANIFOLDS:
        tag = repr(M)
        x = _rand_points(M, n, rng)
        v = _rand_tangent(M, x, rng, _max_norm(M))
        y = M.exp(x, v)
        err = np.abs(M.log(x, y) - v).max()
        out.append(CheckResult("geometry", f"{tag} exp/log round trip", err < 1e-7, f"max err {err:.2e}"))
        w = M.proj_tangent(x, rng.normal(size=x.shape))
        u = M.proj_tangent(x, rng.normal(size=x.shape))
        pw, pu = M.transport(x, y, w), M.transport(x, y, u)
        amb = rng.normal(size=x.shape)
        if M.kappa < 0:
            amb[:, 0] = np.abs(amb[:, 0]) + np.linalg.norm(amb[:, 1:], axis=-1) + 0.1
        memb = max(
            M.membership_error(y).max(),
            M.membership_error(M.project(amb)).max(),
            M.tangency_error(y, pw).max(),
        )
        out.append(CheckResult("geometry", f"{tag} membership closure", memb < 1e-9, f"max err {memb:.2e}"))
        derr = np.abs(M.dist(x, y) - M.norm(v)).max()
        out.append(CheckResult("geometry", f"{tag} distance consistency", derr < 1e-8, f"max err {derr:.2e}"))
        ierr = np.abs(M.metric_inner(y, pw, pu) - M.metric_inner(x, w, u)).max()
        out.append(CheckResult("geometry", f"{tag} transport isometry", ierr < 1e-8, f"max err {ierr:.2e}"))
    return out


def suite_logdet(fast=False):
    out = []
    n = 50
    rng = np.random.default_rng(12)
    for M in MANIFOLDS:
        tag = repr(M)
        errs = []
        for _ in range(n):
            x = _rand_points(M, 1, rng)[0]
            c = rng.normal(size=M.dim)
            c *= rng.uniform(0.0, min(0.9 * M.injectivity_radius, 3.0)) / np.linalg.norm(c)
            v = M.frame(x) @ c
            errs.append(abs(M.logdet_exp(x, v) - _fd_frame_logdet(M, x, c)))
        e = max(errs)
        out.append(CheckResult("logdet", f"{tag} logdet_exp vs finite differences", e < 1e-5, f"max err {e:.2e}"))
    S = Sphere(2)
    errs = []
    for _ in range(n):
        x = _rand_points(S, 1, rng)[0]
        u = S.proj_tangent(x, rng.normal(size=3))
        u /= S.norm(u)
        y = S.exp(x, u * np.arccos(rng.uniform(-0.9, 0.9)))
        d = S.proj_tangent(y, rng.normal(size=3))
        h = 1e-6
        fd = (S.log(x, S.exp(y, h * d)) - S.log(x, S.exp(y, -h * d))) / (2 * h)
        errs.append(np.abs(S.log_jacobian(x, y) @ d - fd).max())
    e = max(errs)
    out.append(CheckResult("logdet", "Sphere(2) log_map_jacobian vs finite differences", e < 1e-5, f"max err {e:.2e}"))
    x = np.array([1.0, 0.0, 0.0])
    th = math.acos(1 - 1e-6)
    y = np.array([math.cos(th), math.sin(th), 0.0])
    e = np.abs(S.log_jacobian(x, y, "closed") - S.log_jacobian(x, y, "series")).max()
    lim = np.abs(S.log_jacobian(x, x) - (np.eye(3) - np.outer(x, x))).max()
    out.append(CheckResult("logdet", "Sphere(2) log_map_jacobian branches at r = 1 - 1e-6",
                           e < 1e-4 and lim < 1e-12, f"branch gap {e:.2e}, limit err {lim:.2e}"))
    return out


# ---------------------------------------------------------------------------
# distributions

def _families():
    H, S = MANIFOLDS
    fams = {name: dist.target_from_name(name) for name in dist.TARGET_NAMES}
    fams["base-h2"] = dist.default_base(H)
    fams["base-s2"] = dist.default_base(S)
    fams["base-antipodal"] = dist.antipodal_base()
    for k in (0.5, 1.0, 10.0, 30.0):
        fams[f"vmf-{k:g}"] = dist.Vmf(S.origin, k, S)
    return fams


def _quad_kw(M, fast):
    if M.kappa < 0:
        return dict(n_r=120, n_phi=120) if fast else dict(n_r=300, n_phi=300)
    return dict(n_theta=120, n_phi=240) if fast else dict(n_theta=300, n_phi=600)


def _rule_for(d, fast):
    """Quadrature rule for ``d``; checkerboards get panels aligned with their cells."""
    if isinstance(d, dist.TangentCheckerboard):
        k = np.arange(d.cells + 1)
        return tangent_box_rule(d.manifold, d.lo[0] + d.side * k, d.lo[1] + d.side * k)
    if isinstance(d, dist.SphericalCheckerboard):
        k = np.arange(d.cells + 1)
        return spherical_box_rule(d.lo[0] + d.side[0] * k, d.lo[1] + d.side[1] * k)
    return manifold_rule(d.manifold, **_quad_kw(d.manifold, fast))


def suite_distributions(fast=False):
    out = []
    rng = np.random.default_rng(13)
    fams = _families()
    n_s = 2000 if fast else 10000
    worst = 0.0
    for name, d in fams.items():
        worst = max(worst, d.manifold.membership_error(d.sample(n_s, rng)).max())
    out.append(CheckResult("distributions", "sampler membership", worst < 1e-9, f"max err {worst:.2e}"))

    for name, d in fams.items():
        M = d.manifold
        pts, w = _rule_for(d, fast)
        Z = float(np.sum(w * np.exp(d.logpdf(pts))))
        detail = f"Z = {Z:.6f}"
        if M.kappa < 0:
            far = np.mean(M.dist(M.origin, d.sample(n_s, rng)) > 6.0)
            detail += f", tail beyond r=6 <= {far + 3 / n_s:.1e}"
        out.append(CheckResult("distributions", f"{name} integrates to 1", abs(Z - 1) < 1e-3, detail))

    exact = [k for k, d in fams.items() if not isinstance(d, (dist.TangentCheckerboard, dist.SphericalCheckerboard))]
    for name in exact:
        d = fams[name]
        M = d.manifold
        pts, w = manifold_rule(M, **_quad_kw(M, fast))
        lp = d.logpdf(pts)
        p = np.exp(lp)
        ok = p > 0
        ent = float(np.sum(w[ok] * p[ok] * lp[ok]))
        s = d.logpdf(d.sample(n_s, rng))
        mc, se = float(s.mean()), float(s.std(ddof=1) / math.sqrt(n_s))
        out.append(CheckResult("distributions", f"{name} E[log p] sampler vs quadrature",
                               abs(mc - ent) < 3 * se + 1e-6, f"mc {mc:.4f} +- {se:.4f}, quad {ent:.4f}"))

    S = MANIFOLDS[1]
    for k in (0.5, 1.0, 10.0, 30.0):
        d = dist.Vmf(S.origin, k, S)
        c = d.sample(n_s, rng) @ S.origin
        want = 1 / math.tanh(k) - 1 / k
        se = c.std(ddof=1) / math.sqrt(n_s)
        out.append(CheckResult("distributions", f"vMF moment kappa={k:g}", abs(c.mean() - want) < 3 * se,
                               f"{c.mean():.4f} vs {want:.4f} (se {se:.4f})"))
    return out


# ---------------------------------------------------------------------------
# dynamics

def _allclose(a, b, rtol, atol=1e-7):
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.abs(b)))


def suite_dynamics(fast=False):
    out = []
    rng = np.random.default_rng(14)
    n = 20 if fast else 100
    h = 1e-5
    for M in MANIFOLDS:
        tag = repr(M)
        bad_jac = bad_vjp = bad_chart = 0
        worst_tr = 0.0
        for i in range(n):
            p = dyn.FieldParams.init(M, rng=rng)
            z = _rand_points(M, 1, rng)
            t = float(rng.uniform())
            Df = dyn.field_jacobian_z(p, z, t)[0]
            I = np.eye(M.ambient_dim)
            fd = np.stack([(dyn.field_eval(p, z + h * I[j], t) - dyn.field_eval(p, z - h * I[j], t))[0] / (2 * h)
                           for j in range(M.ambient_dim)], axis=-1)
            bad_jac += not _allclose(Df, fd, 1e-4)

            cot = M.proj_tangent(z, rng.normal(size=z.shape))
            g = dyn.field_vjp_params(p, z, t, cot)
            ks = rng.choice(p.theta.size, 5, replace=False)
            fdp = []
            for k in ks:
                e = np.zeros_like(p.theta)
                e[k] = h
                fdp.append((np.sum(cot * dyn.field_eval(p.with_theta(p.theta + e), z, t))
                            - np.sum(cot * dyn.field_eval(p.with_theta(p.theta - e), z, t))) / (2 * h))
            bad_vjp += not _allclose(g[ks], np.array(fdp), 1e-4)

            E = M.frame(z)
            y = rng.normal(size=(1, M.dim)) * 0.5
            a = rng.normal(size=(1, M.dim))
            w = rng.normal(size=1)
            gy, _ = dyn.chart_vjp(p, z, E, y, t, a, w)

            def J(yy):
                ev = dyn.chart_eval(p, z, E, yy, t)
                return float(np.sum(a * ev.ghat) + np.sum(w * ev.trace))

            fdy = np.array([(J(y + h * np.eye(M.dim)[k]) - J(y - h * np.eye(M.dim)[k])) / (2 * h) for k in range(M.dim)])
            bad_chart += not _allclose(gy[0], fdy, 1e-4)

            div = dyn.field_divergence(p, z, t)[0]
            y0 = np.zeros((1, M.dim))
            tr = sum(
                (dyn.chart_eval(p, z, E, y0 + h * np.eye(M.dim)[k], t).ghat[0, k]
                 - dyn.chart_eval(p, z, E, y0 - h * np.eye(M.dim)[k], t).ghat[0, k]) / (2 * h)
                for k in range(M.dim)
            )
            worst_tr = max(worst_tr, abs(div - tr))
        out.append(CheckResult("dynamics", f"{tag} field_jacobian_z vs finite differences", bad_jac == 0, f"{bad_jac}/{n} mismatches"))
        out.append(CheckResult("dynamics", f"{tag} field_vjp_params vs finite differences", bad_vjp == 0, f"{bad_vjp}/{n} mismatches"))
        out.append(CheckResult("dynamics", f"{tag} chart pullback gradient vs finite differences", bad_chart == 0, f"{bad_chart}/{n} mismatches"))
        out.append(CheckResult("dynamics", f"{tag} divergence vs diagonal finite differences", worst_tr < 1e-5, f"max err {worst_tr:.2e}"))

        p = dyn.FieldParams.init(M, rng=5)
        lips = []
        for m in (200, 800):
            cloud = _rand_points(M, m, np.random.default_rng(6), scale=0.7)
            f = dyn.field_eval(p, cloud, 0.5)
            df = np.linalg.norm(f[:, None] - f[None], axis=-1)
            dz = np.linalg.norm(cloud[:, None] - cloud[None], axis=-1)
            np.fill_diagonal(dz, np.inf)
            lips.append(float(np.max(df / dz)))
        stable = all(map(math.isfinite, lips)) and lips[1] <= 1.5 * lips[0]
        out.append(CheckResult("dynamics", f"{tag} Lipschitz estimate stable under refinement", stable,
                               f"L = {lips[0]:.3f} -> {lips[1]:.3f}"))
    return out


# ---------------------------------------------------------------------------
# solvers

def _points_near_origin(M, n, rng, scale=0.5):
    return _rand_points(M, n, rng, scale)


def suite_solvers(fast=False):
    out = []
    rng = np.random.default_rng(15)
    H, S = MANIFOLDS
    # chart-count invariance on H^2 with projected dynamics
    p = dyn.FieldParams.init(H, dyn.FieldMode.AMBIENT_PROJECTED, rng=1)
    z0 = _points_near_origin(H, 4, rng, 0.7)
    ref = solvers.dynamic_chart_integrate(p, z0, solvers.TimeGrid(steps_per_segment=160))
    half = solvers.dynamic_chart_integrate(p, z0, solvers.TimeGrid(steps_per_segment=80))
    tol = max(np.abs(ref.z - half.z).max(), np.abs(ref.delta - half.delta).max(), 1e-13)
    var = 0.0
    for K in (2, 4, 8, 16):
        tr = solvers.dynamic_chart_integrate(p, z0, solvers.TimeGrid(steps_per_segment=160 // K, num_charts=K))
        var = max(var, np.abs(tr.z - ref.z).max(), np.abs(tr.delta - ref.delta).max())
    out.append(CheckResult("solvers", "chart-count invariance K in {1,2,4,8,16}", var < 10 * tol,
                           f"variation {var:.2e}, solver tol {tol:.2e}"))

    # projected dynamics on H^2 grow like cosh(r), so these use moderate weights
    for M in MANIFOLDS:
        tag = repr(M)
        p = dyn.FieldParams.init(M, dyn.FieldMode.AMBIENT_PROJECTED, rng=2, scale=0.5)
        z0 = _points_near_origin(M, 3, rng)
        zs = [solvers.dynamic_chart_integrate(p, z0, solvers.TimeGrid(steps_per_segment=s)).z for s in (5, 10, 20)]
        ratio = np.linalg.norm(zs[0] - zs[1]) / np.linalg.norm(zs[1] - zs[2])
        out.append(CheckResult("solvers", f"{tag} RK4 order", abs(ratio / 16 - 1) < 0.2, f"halving ratio {ratio:.2f}"))
        ze = [solvers.manifold_euler_integrate(p, z0, solvers.TimeGrid(steps_per_segment=s)) for s in (200, 400, 800)]
        ratio = np.linalg.norm(ze[0] - ze[1]) / np.linalg.norm(ze[1] - ze[2])
        out.append(CheckResult("solvers", f"{tag} manifold Euler order", abs(ratio / 2 - 1) < 0.2, f"halving ratio {ratio:.2f}"))

        zp = solvers.projection_integrate(p, z0, solvers.TimeGrid(steps_per_segment=50))
        tr = solvers.dynamic_chart_integrate(p, z0, solvers.TimeGrid(num_charts=4))
        memb = max(M.membership_error(zp).max(), M.membership_error(ze[0]).max(), M.membership_error(tr.z).max())
        out.append(CheckResult("solvers", f"{tag} manifold closure", memb < 1e-8, f"max err {memb:.2e}"))

        back = solvers.dynamic_chart_integrate(p, tr.z, solvers.TimeGrid(num_charts=4), reverse=True)
        rerr = max(np.abs(back.z - z0).max(), np.abs(back.delta + tr.delta).max())
        out.append(CheckResult("solvers", f"{tag} reverse consistency", rerr < 1e-6, f"max err {rerr:.2e}"))

        modes = [dyn.FieldMode.AMBIENT_PROJECTED] + ([dyn.FieldMode.TANGENT_DIRECT] if M.kappa < 0 else [])
        for mode in modes:
            p = dyn.FieldParams.init(M, mode, rng=3, scale=0.5)
            grid = solvers.TimeGrid(num_charts=2 if mode == dyn.FieldMode.AMBIENT_PROJECTED else 1,
                                    steps_per_segment=5 if fast else 10)
            z0 = _points_near_origin(M, 3, rng)
            a_end = rng.normal(size=z0.shape)
            w = rng.normal(size=3)

            def loss(pp, zz):
                t = solvers.dynamic_chart_integrate(pp, zz, grid, reverse=True)
                return float(np.sum(a_end * t.z) + np.sum(w * t.delta))

            traj = solvers.dynamic_chart_integrate(p, z0, grid, reverse=True)
            gz, gt = solvers.adjoint_integrate(traj, a_end, w)
            h = 1e-6
            ks, start = [], 0
            for W, b in p.layers():
                ks += [start, start + W.size]
                start += W.size + b.size
            fd = np.array([(loss(p.with_theta(p.theta + h * np.eye(1, p.theta.size, k)[0]), z0)
                            - loss(p.with_theta(p.theta - h * np.eye(1, p.theta.size, k)[0]), z0)) / (2 * h) for k in ks])
            v = M.proj_tangent(z0, rng.normal(size=z0.shape))
            fdz = (loss(p, M.exp(z0, h * v)) - loss(p, M.exp(z0, -h * v))) / (2 * h)
            ok = np.allclose(gt[ks], fd, rtol=1e-3, atol=1e-6) and math.isclose(np.sum(gz * v), fdz, rel_tol=1e-3, abs_tol=1e-6)
            err = max(np.abs(gt[ks] - fd).max(), abs(np.sum(gz * v) - fdz))
            out.append(CheckResult("solvers", f"{tag} {mode.value} adjoint vs finite differences (z0, every block)", ok,
                                   f"max abs err {err:.2e}"))
    return out


# ---------------------------------------------------------------------------
# flow

def suite_flow(fast=False):
    out = []
    rng = np.random.default_rng(16)
    n_models = 1 if fast else 3
    for M in MANIFOLDS:
        tag = repr(M)
        kw = dict(n_r=100, n_phi=100) if (fast and M.kappa < 0) else (dict(n_theta=80, n_phi=160) if fast else {})
        if not fast and M.kappa < 0:
            kw = dict(n_r=150, n_phi=150)
        if not fast and M.kappa > 0:
            kw = dict(n_theta=120, n_phi=240)
        for i in range(n_models):
            model = flow.FlowModel.create(M, rng=100 + i, grid=solvers.TimeGrid(steps_per_segment=10 if fast else 20))
            Z = integrate_density(lambda x: flow.mcnf_logprob(model, x, allow_failures=True), M, **kw)
            out.append(CheckResult("flow", f"{tag} normalization (model {i})", abs(Z - 1) < 5e-3, f"Z = {Z:.5f}"))

        model = flow.FlowModel.create(M, rng=7)
        z = model.base.sample(5, rng)
        fwd = flow._pass(model, z, False, False)
        back = flow._pass(model, fwd.z, True, False)
        err = np.abs(back.z - z).max()
        out.append(CheckResult("flow", f"{tag} sample/inverse round trip", err < 1e-6, f"max err {err:.2e}"))

        x = _rand_points(M, 4, rng, 0.5)
        zero = flow.FlowModel(dyn.FieldParams.zeros(M, model.params.mode), model.base)
        err = np.abs(flow.mcnf_logprob(zero, x) - model.base.logpdf(x)).max()
        out.append(CheckResult("flow", f"{tag} identity flow reproduces the base", err <= 1e-9, f"max err {err:.2e}"))

    H = MANIFOLDS[0]
    p = dyn.FieldParams.init(H, dyn.FieldMode.AMBIENT_PROJECTED, rng=1, scale=0.5)
    base = dist.default_base(H)
    x = _rand_points(H, 4, rng, 0.7)
    lps = {K: flow.mcnf_logprob(flow.FlowModel(p, base, solvers.TimeGrid(steps_per_segment=160 // K, num_charts=K)), x)
           for K in (1, 2, 4, 8, 16)}
    half = flow.mcnf_logprob(flow.FlowModel(p, base, solvers.TimeGrid(steps_per_segment=80)), x)
    tol = max(np.abs(lps[1] - half).max(), 1e-13)
    var = max(np.abs(lps[K] - lps[1]).max() for K in lps)
    out.append(CheckResult("flow", "chart-count invariance of log p", var < 10 * tol, f"variation {var:.2e}, solver tol {tol:.2e}"))
    return out


SUITES = {
    "geometry": suite_geometry,
    "logdet": suite_logdet,
    "distributions": suite_distributions,
    "dynamics": suite_dynamics,
    "solvers": suite_solvers,
    "flow": suite_flow,
}


def run_checks(fast=False, only=None):
    results = []
    for name, fn in SUITES.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        res = fn(fast)
        dt = time.perf_counter() - t0
        for r in res:
            r.seconds = dt / max(len(res), 1)
        results.extend(res)
    return results
