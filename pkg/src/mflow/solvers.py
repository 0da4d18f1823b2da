"""ODE integrators: Euclidean RK4, manifold single-step schemes, the dynamic
chart pass and its two adjoints.

The chart pass integrates a batch of points in exp-map charts. Every row has
its own anchor; a segment boundary re-anchors all rows at their current point
(fixed K), and the adaptive policy also re-anchors single rows whenever their
chart coordinates approach the edge of the injectivity ball. Alongside the
chart coordinates we integrate ``c = int tr(D_y g) dt`` and fold each chart
block into the log-density change

    delta = sum over blocks of [L(y_end) - L(y_start) + c],

so that a pass from ``t_a`` to ``t_b`` satisfies
``log p_tb(z_b) = log p_ta(z_a) - delta``.

Per-step checkpoints (anchor, frame, step start and end coordinates) are kept
so that both adjoints can integrate backwards one RK4 step at a time.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    CHART_EPS,
    FieldMode,
    FieldParams,
    ambient_vjp,
    chart_eval,
    chart_radius,
    chart_vjp,
    clip_speed,
    field_divergence,
    field_eval,
)
from .errors import ChartOverflowError, DomainError, NumericError, StepSizeError


@dataclass(frozen=True)
class TimeGrid:
    t_start: float = 0.0
    t_end: float = 1.0
    steps_per_segment: int = 20
    num_charts: int = 1

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError("t_start must be smaller than t_end")
        if self.steps_per_segment < 1 or self.num_charts < 1:
            raise ValueError("steps_per_segment and num_charts must be >= 1")

    def boundaries(self):
        K = self.num_charts
        return np.array([self.t_start + i * (self.t_end - self.t_start) / K for i in range(K + 1)])

    @property
    def total_steps(self):
        return self.num_charts * self.steps_per_segment


class ChartPolicyKind(str, enum.Enum):
    FIXED = "fixed"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class ChartPolicy:
    kind: ChartPolicyKind = ChartPolicyKind.FIXED
    eps: float = CHART_EPS

    def __post_init__(self):
        object.__setattr__(self, "kind", ChartPolicyKind(self.kind))
        if not 0.0 < self.eps < 1.0:
            raise ValueError("chart margin eps must lie in (0, 1)")


@dataclass
class ChartSegment:
    """One chart used by a group of rows: exp at ``anchor`` with ``frame``."""

    t_start: float
    t_end: float
    anchor: np.ndarray
    frame: np.ndarray
    rows: np.ndarray


@dataclass
class StepRecord:
    t0: float
    h: float
    x: np.ndarray
    E: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    switched: np.ndarray  # rows whose chart was replaced right before this step
    segment: int


@dataclass
class ChartTrajectory:
    z: np.ndarray
    delta: np.ndarray
    failed: np.ndarray
    segments: list
    steps: list
    z0: np.ndarray
    y_init: np.ndarray
    params: FieldParams = field(repr=False, default=None)

    def __iter__(self):
        yield self.z
        yield self.segments


# ---------------------------------------------------------------------------
# Euclidean RK4

def rk4_integrate(dynamics, y0, t0, t1, steps, dense=False):
    """Classical fixed-step RK4 for ``dy/dt = dynamics(t, y)``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    y = np.array(y0, dtype=float)
    h = (t1 - t0) / steps
    traj = [y.copy()] if dense else None
    for i in range(steps):
        t = t0 + i * h
        k1 = dynamics(t, y)
        k2 = dynamics(t + h / 2, y + h / 2 * k1)
        k3 = dynamics(t + h / 2, y + h / 2 * k2)
        k4 = dynamics(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NumericError(f"non-finite state at step {i}", step=i)
        if dense:
            traj.append(y.copy())
    return (y, np.array(traj)) if dense else y


def _grid_times(grid: TimeGrid):
    n = grid.total_steps
    return np.array([grid.t_start + i * (grid.t_end - grid.t_start) / n for i in range(n + 1)])


def manifold_euler_integrate(params: FieldParams, z0, grid: TimeGrid):
    """Repeated ``z <- exp_z(h f(z, t))`` over all steps of the grid."""
    M = params.manifold
    z = np.array(z0, dtype=float)
    ts = _grid_times(grid)
    for i in range(len(ts) - 1):
        h = ts[i + 1] - ts[i]
        v = h * field_eval(params, z, ts[i])
        if np.any(M.norm(v) >= M.injectivity_radius):
            raise StepSizeError(f"Euler step {i} leaves the injectivity radius")
        z = M.exp(z, v)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state at step {i}", step=i)
    return z


def projection_integrate(params: FieldParams, z0, grid: TimeGrid):
    """Ambient RK4 steps, each followed by projection onto the manifold."""
    M = params.manifold
    z = np.array(z0, dtype=float)
    ts = _grid_times(grid)
    for i in range(len(ts) - 1):
        z = _ambient_rk4_step(params, z, ts[i], ts[i + 1] - ts[i])
        try:
            z = M.project(z)
        except DomainError as exc:
            raise type(exc)(f"projection failed at step {i}: {exc}") from None
    return z


def _ambient_rk4_step(params, z, t, h):
    k1 = field_eval(params, z, t)
    k2 = field_eval(params, z + h / 2 * k1, t + h / 2)
    k3 = field_eval(params, z + h / 2 * k2, t + h / 2)
    k4 = field_eval(params, z + h * k3, t + h)
    return z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


# ---------------------------------------------------------------------------
# dynamic chart pass

# Chart coordinates beyond this radius overflow cosh/sinh within a few steps on
# the hyperboloid; such rows are treated like non-finite ones.
Y_MAX = 50.0


def _logdet(M, y):
    return M.logdet_exp_radius(np.linalg.norm(y, axis=-1)) if M.dim > 1 else np.zeros(y.shape[0])


def dynamic_chart_integrate(
    params: FieldParams,
    z0,
    grid: TimeGrid = TimeGrid(),
    policy: ChartPolicy = ChartPolicy(),
    reverse=False,
    allow_failures=False,
    speed_limit=None,
    keep_steps=True,
):
    """Integrate ``dz/dt = f`` through a sequence of exp-map charts.

    ``reverse`` runs from ``t_end`` to ``t_start``. Returns a ChartTrajectory;
    unpacking it gives ``(z_end, segments)``. Under the fixed policy a row
    whose chart coordinates overflow raises ChartOverflowError, and a row
    that turns non-finite raises NumericError; with ``allow_failures`` such
    rows are frozen and marked in ``failed`` instead.
    """
    M = params.manifold
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    N, n = z0.shape[0], M.dim
    td = params.mode is FieldMode.TANGENT_DIRECT
    adaptive = policy.kind is ChartPolicyKind.ADAPTIVE
    if td and (grid.num_charts != 1 or adaptive):
        raise ValueError("tangent-direct dynamics use exactly one fixed chart")
    rho = chart_radius(M, policy.eps)
    switch_radius = (1.0 - policy.eps) * rho
    times = grid.boundaries()
    if reverse:
        times = times[::-1]
    K, spp = grid.num_charts, grid.steps_per_segment

    if td:
        x = M.origin_like((N,))
        E = M.frame(x)
        y = M.coords(E, M.log(x, z0))
    else:
        x = z0.copy()
        E = M.frame(x)
        y = np.zeros((N, n))
    y_init = y.copy()
    y_start = y.copy()
    c = np.zeros(N)
    delta = np.zeros(N)
    failed = np.zeros(N, dtype=bool)
    seg_id = np.zeros(N, dtype=int)
    segments = [ChartSegment(times[0], times[0], x.copy(), E.copy(), np.ones(N, dtype=bool))]
    steps = []

    def close(rows, t):
        delta[rows] += _logdet(M, y[rows]) - _logdet(M, y_start[rows]) + c[rows]
        for s in np.unique(seg_id[rows]):
            segments[s].t_end = t

    def reanchor(rows, t):
        close(rows, t)
        xn = M.project(M.chart(x[rows], E[rows], y[rows]))
        x[rows] = xn
        E[rows] = M.frame(xn)
        y[rows] = 0.0
        y_start[rows] = 0.0
        c[rows] = 0.0
        mask = np.zeros(N, dtype=bool)
        mask[rows] = True
        seg_id[rows] = len(segments)
        segments.append(ChartSegment(t, t, x.copy(), E.copy(), mask))

    def rk4(rows, t0, h):
        xs, Es, ys = x[rows], E[rows], y[rows]
        over = np.zeros(len(rows), dtype=bool)

        def stage(yy, tt):
            ev = chart_eval(params, xs, Es, yy, tt, rho)
            nonlocal over
            over |= ev.overflow
            return clip_speed(ev.ghat, speed_limit), ev.trace

        # diverging rows are detected after the step; keep numpy quiet meanwhile
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            k1, c1 = stage(ys, t0)
            k2, c2 = stage(ys + h / 2 * k1, t0 + h / 2)
            k3, c3 = stage(ys + h / 2 * k2, t0 + h / 2)
            k4, c4 = stage(ys + h * k3, t0 + h)
            y1 = ys + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            dc = h / 6 * (c1 + 2 * c2 + 2 * c3 + c4)
            over |= np.linalg.norm(y1, axis=-1) >= rho
        return y1, dc, over

    gstep = 0
    switched = np.zeros(N, dtype=bool)
    for seg in range(K):
        ta, tb = times[seg], times[seg + 1]
        h = (tb - ta) / spp
        if seg > 0 and not td:
            live = np.flatnonzero(~failed)
            reanchor(live, ta)
            switched = np.zeros(N, dtype=bool)
            switched[live] = True
        for s in range(spp):
            t0 = ta + s * h
            if adaptive:
                near = np.flatnonzero(~failed & (np.linalg.norm(y, axis=-1) > switch_radius))
                if near.size:
                    reanchor(near, t0)
                    switched[near] = True
            rows = np.flatnonzero(~failed)
            y1, dc, over = rk4(rows, t0, h)
            if np.any(over):
                bad = rows[over]
                if adaptive:
                    retry = bad[np.linalg.norm(y[bad], axis=-1) > 0]
                    if retry.size:
                        reanchor(retry, t0)
                        switched[retry] = True
                        y1r, dcr, overr = rk4(retry, t0, h)
                        pos = np.searchsorted(rows, retry)
                        y1[pos], dc[pos], over[pos] = y1r, dcr, overr
                    bad = rows[over]
                if bad.size:
                    if not allow_failures:
                        raise ChartOverflowError(
                            f"chart coordinates reached the injectivity radius at step {gstep} (segment {seg})",
                            mask=np.isin(np.arange(N), bad),
                        )
                    failed[bad] = True
                    keep = ~over
                    rows, y1, dc = rows[keep], y1[keep], dc[keep]
            with np.errstate(invalid="ignore"):
                finite = np.all(np.isfinite(y1), axis=-1) & np.isfinite(dc) & (np.linalg.norm(y1, axis=-1) < Y_MAX)
            if not np.all(finite):
                if not allow_failures:
                    r = rows[~finite][0]
                    raise NumericError(
                        f"non-finite chart coordinates at step {gstep} (segment {seg})",
                        step=gstep, segment=seg, anchor=x[r].copy(),
                    )
                failed[rows[~finite]] = True
                rows, y1, dc = rows[finite], y1[finite], dc[finite]
            if keep_steps:
                y0_full = y.copy()
            y[rows] = y1
            c[rows] += dc
            if keep_steps:
                steps.append(StepRecord(t0, h, x.copy(), E.copy(), y0_full, y.copy(), switched.copy(), seg))
            switched = np.zeros(N, dtype=bool)
            gstep += 1
    live = np.flatnonzero(~failed)
    close(live, times[-1])
    z = M.chart(x, E, y)
    return ChartTrajectory(z, delta, failed, segments, steps, z0, y_init, params)


def write_trajectory_csv(path, traj: ChartTrajectory):
    """Dump per-step states as CSV rows (row, t, ambient coords..., chart index)."""
    M = traj.params.manifold
    d = M.ambient_dim
    chart = np.zeros(traj.z.shape[0], dtype=int)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["row", "t"] + [f"z{i}" for i in range(d)] + ["chart"])
        for k, rec in enumerate(traj.steps):
            chart = chart + rec.switched
            zs = M.chart(rec.x, rec.E, rec.y0 if k == 0 else rec.y1)
            if k == 0:
                for i in range(zs.shape[0]):
                    wr.writerow([i, repr(float(rec.t0))] + [repr(float(v)) for v in zs[i]] + [int(chart[i])])
                zs = M.chart(rec.x, rec.E, rec.y1)
            for i in range(zs.shape[0]):
                wr.writerow([i, repr(float(rec.t0 + rec.h))] + [repr(float(v)) for v in zs[i]] + [int(chart[i])])


# ---------------------------------------------------------------------------
# adjoints

def adjoint_integrate(traj: ChartTrajectory, a_end, w, backend="chart"):
    """Backward pass for the loss ``sum_i a_end_i . z_end_i + w_i delta_i``.

    ``a_end`` is an ambient covector at the final points, ``w`` per-row
    weights on the log-density change. Returns ``(grad_z0, grad_theta)``
    where ``grad_z0`` is an ambient covector at the starting points (only its
    tangential part is meaningful). Failed rows get zero gradient.
    """
    if traj is None or (not traj.steps and traj.params is None):
        raise ValueError("adjoint needs a forward trajectory recorded with keep_steps=True")
    if not traj.steps:
        raise ValueError("adjoint needs a forward trajectory recorded with keep_steps=True")
    params = traj.params
    N = traj.z.shape[0]
    a_end = np.asarray(a_end, dtype=float).reshape(N, -1)
    w = np.broadcast_to(np.asarray(w, dtype=float), (N,)).copy()
    live = np.flatnonzero(~traj.failed)
    if backend == "chart":
        g0, gth = _chart_adjoint(params, traj, a_end, w, live)
    elif backend == "ambient":
        g0, gth = _ambient_adjoint(params, traj, a_end, w, live)
    else:
        raise ValueError(f"unknown adjoint backend {backend!r}")
    grad_z0 = np.zeros_like(traj.z0)
    grad_z0[live] = g0
    return grad_z0, gth


def _chart_adjoint(params, traj, a_end, w, live):
    M = params.manifold
    w = w[live]
    last = traj.steps[-1]
    x, E, y = last.x[live], last.E[live], last.y1[live]
    B = M.chart_jacobian(x, E, y)
    gL, _ = M.chart_logdet_grad(y)
    a = np.einsum("nd,ndi->ni", a_end[live], B) + w[:, None] * gL
    gth = np.zeros_like(params.theta)
    for j in range(len(traj.steps) - 1, -1, -1):
        rec = traj.steps[j]
        x, E = rec.x[live], rec.E[live]
        y1 = rec.y1[live]
        hb = -rec.h
        t1 = rec.t0 + rec.h

        def F(yy, aa, tt):
            ev = chart_eval(params, x, E, yy, tt, np.inf)
            gy, gt = chart_vjp(params, x, E, yy, tt, aa, w, ev)
            return ev.ghat, -gy, -gt

        k1y, k1a, k1t = F(y1, a, t1)
        k2y, k2a, k2t = F(y1 + hb / 2 * k1y, a + hb / 2 * k1a, t1 + hb / 2)
        k3y, k3a, k3t = F(y1 + hb / 2 * k2y, a + hb / 2 * k2a, t1 + hb / 2)
        _, k4a, k4t = F(y1 + hb * k3y, a + hb * k3a, t1 + hb)
        a = a + hb / 6 * (k1a + 2 * k2a + 2 * k3a + k4a)
        gth += hb / 6 * (k1t + 2 * k2t + 2 * k3t + k4t)
        sw = rec.switched[live]
        if j > 0 and np.any(sw):
            prev = traj.steps[j - 1]
            r = np.flatnonzero(sw)
            # covector at the new anchor (y = 0, D phi = E) -> ambient -> old chart
            a_amb = np.einsum("ni,ndi->nd", a[r], E[r]) * M.metric_diag
            xo, Eo, yo = prev.x[live][r], prev.E[live][r], prev.y1[live][r]
            Bo = M.chart_jacobian(xo, Eo, yo)
            gLo, _ = M.chart_logdet_grad(yo)
            a[r] = np.einsum("nd,ndi->ni", a_amb, Bo) + w[r, None] * gLo
    first = traj.steps[0]
    x, E = first.x[live], first.E[live]
    gL0, _ = M.chart_logdet_grad(traj.y_init[live])
    cov = np.einsum("ni,ndi->nd", a - w[:, None] * gL0, E) * M.metric_diag
    grad_z0 = np.einsum("nd,nde->ne", cov, M.log_jacobian(x, traj.z0[live]))
    return grad_z0, gth


def _ambient_adjoint(params, traj, a_end, w, live):
    if params.mode is not FieldMode.AMBIENT_PROJECTED:
        raise ValueError("the ambient adjoint supports ambient-projected dynamics only")
    M = params.manifold
    w = w[live]

    def tangent(a, z):
        return a - M.kappa * np.sum(a * z, axis=-1)[:, None] * M.lower(z)

    last = traj.steps[-1]
    z_end = M.chart(last.x[live], last.E[live], last.y1[live])
    a = tangent(a_end[live], z_end)
    gth = np.zeros_like(params.theta)
    for j in range(len(traj.steps) - 1, -1, -1):
        rec = traj.steps[j]
        z1 = M.chart(rec.x[live], rec.E[live], rec.y1[live])
        z0 = M.chart(rec.x[live], rec.E[live], rec.y0[live])
        hb = -rec.h
        t1 = rec.t0 + rec.h

        def F(zz, aa, tt):
            f = field_eval(params, zz, tt)
            gz, gt = ambient_vjp(params, zz, tt, aa, w)
            return f, -gz, -gt

        k1z, k1a, k1t = F(z1, a, t1)
        k2z, k2a, k2t = F(z1 + hb / 2 * k1z, a + hb / 2 * k1a, t1 + hb / 2)
        k3z, k3a, k3t = F(z1 + hb / 2 * k2z, a + hb / 2 * k2a, t1 + hb / 2)
        _, k4a, k4t = F(z1 + hb * k3z, a + hb * k3a, t1 + hb)
        a = tangent(a + hb / 6 * (k1a + 2 * k2a + 2 * k3a + k4a), z0)
        gth += hb / 6 * (k1t + 2 * k2t + 2 * k3t + k4t)
    return a, gth


def ambient_logdensity_pass(params: FieldParams, z0, grid: TimeGrid, reverse=False):
    """Projected ambient RK4 with ``int div_M f dt``; a cross-check for the chart pass."""
    M = params.manifold
    z = np.atleast_2d(np.asarray(z0, dtype=float))
    ts = _grid_times(grid)
    if reverse:
        ts = ts[::-1]
    c = np.zeros(z.shape[0])
    for i in range(len(ts) - 1):
        t, h = ts[i], ts[i + 1] - ts[i]
        f1 = field_eval(params, z, t)
        d1 = field_divergence(params, z, t)
        z2 = z + h / 2 * f1
        f2, d2 = field_eval(params, z2, t + h / 2), field_divergence(params, z2, t + h / 2)
        z3 = z + h / 2 * f2
        f3, d3 = field_eval(params, z3, t + h / 2), field_divergence(params, z3, t + h / 2)
        z4 = z + h * f3
        f4, d4 = field_eval(params, z4, t + h), field_divergence(params, z4, t + h)
        z = M.project(z + h / 6 * (f1 + 2 * f2 + 2 * f3 + f4))
        c += h / 6 * (d1 + 2 * d2 + 2 * d3 + d4)
    return z, c
