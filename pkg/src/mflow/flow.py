"""Manifold continuous normalizing flow: density evaluation, sampling, NLL gradient.

Density evaluation runs the chart pass backwards from the data at ``t_end``
to ``t_start`` and adds the accumulated change to the base log-density:

    log p(x) = log pi(z_start) + delta.

Sampling runs forwards from base draws and subtracts the change.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .distributions import Density, default_base, density_from_dict
from .dynamics import (
    FieldMode,
    FieldParams,
    params_from_header,
    params_header,
    read_checkpoint,
    write_checkpoint,
)
from .errors import DomainError
from .geometry import Hyperboloid, Manifold
from .solvers import ChartPolicy, TimeGrid, adjoint_integrate, dynamic_chart_integrate


def default_mode(manifold: Manifold) -> FieldMode:
    """Tangent-direct dynamics in the global chart on the hyperboloid, projected ones on the sphere.

    On the hyperboloid the projected field ``P_z h`` has speed growing like
    ``cosh(r) |h|``, so generic parameters blow up in finite time; a bounded
    network velocity in the single chart at the origin does not.
    """
    return FieldMode.TANGENT_DIRECT if isinstance(manifold, Hyperboloid) else FieldMode.AMBIENT_PROJECTED


@dataclass
class FlowModel:
    params: FieldParams
    base: Density
    grid: TimeGrid = field(default_factory=TimeGrid)
    policy: ChartPolicy = field(default_factory=ChartPolicy)
    speed_limit: float = None

    def __post_init__(self):
        if self.base.manifold != self.params.manifold:
            raise ValueError("base density and dynamics live on different manifolds")

    @property
    def manifold(self) -> Manifold:
        return self.params.manifold

    @classmethod
    def create(cls, manifold, base=None, mode=None, grid=None, policy=None,
               hidden=32, num_layers=4, rng=None, speed_limit=None):
        params = FieldParams.init(manifold, mode or default_mode(manifold), hidden, num_layers, rng)
        return cls(params, base or default_base(manifold), grid or TimeGrid(), policy or ChartPolicy(), speed_limit)

    def with_theta(self, theta):
        return replace(self, params=self.params.with_theta(theta))

    def header(self):
        h = params_header(self.params)
        h.update(
            kind="flow",
            base=self.base.to_dict(),
            grid={
                "t_start": self.grid.t_start,
                "t_end": self.grid.t_end,
                "steps_per_segment": self.grid.steps_per_segment,
                "num_charts": self.grid.num_charts,
            },
            policy={"kind": self.policy.kind.value, "eps": self.policy.eps},
            speed_limit=self.speed_limit,
        )
        return h


def save_model(path, model: FlowModel):
    write_checkpoint(path, model.header(), model.params.theta)


def load_model(path) -> FlowModel:
    header, theta = read_checkpoint(path)
    if header.get("kind") != "flow":
        raise DomainError("checkpoint does not hold a flow model")
    params = params_from_header(header, theta)
    return FlowModel(
        params,
        density_from_dict(header["base"]),
        TimeGrid(**header["grid"]),
        ChartPolicy(**header["policy"]),
        header.get("speed_limit"),
    )


def _pass(model, x, reverse, allow_failures, keep_steps=False):
    return dynamic_chart_integrate(
        model.params, x, model.grid, model.policy, reverse=reverse,
        allow_failures=allow_failures, speed_limit=model.speed_limit, keep_steps=keep_steps,
    )


def mcnf_logprob(model: FlowModel, x, allow_failures=False, return_failed=False):
    """Log-density of the flow at points ``x`` (one point or a batch).

    With ``allow_failures`` rows whose backward pass overflowed a fixed chart
    get ``-inf`` and are reported in the returned mask.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    traj = _pass(model, np.atleast_2d(x), True, allow_failures)
    lp = np.full(traj.z.shape[0], -np.inf)
    ok = ~traj.failed
    lp[ok] = model.base.logpdf(traj.z[ok]) + traj.delta[ok]
    out = lp[0] if single else lp
    return (out, traj.failed) if return_failed else out


def mcnf_sample(model: FlowModel, count, rng, allow_failures=False):
    """Draw ``count`` points; returns ``(points, logprob)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    z = model.base.sample(count, rng)
    traj = _pass(model, z, False, allow_failures)
    lp = model.base.logpdf(z) - traj.delta
    lp[traj.failed] = np.nan
    return traj.z, lp


@dataclass
class NLLResult:
    nll: float
    grad: np.ndarray
    failed: np.ndarray

    def __iter__(self):
        yield self.nll
        yield self.grad


def nll_and_grad(model: FlowModel, batch, backend="chart", allow_failures=False) -> NLLResult:
    """Mean negative log-likelihood over ``batch`` and its parameter gradient.

    Unpacks as ``(nll, grad)``. Rows that fail under ``allow_failures`` are
    left out of both the mean and the gradient and flagged in ``failed``.
    """
    x = np.atleast_2d(np.asarray(batch, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    traj = _pass(model, x, True, allow_failures, keep_steps=True)
    ok = ~traj.failed
    n_ok = int(ok.sum())
    if n_ok == 0:
        return NLLResult(np.nan, np.zeros_like(model.params.theta), traj.failed)
    lp = model.base.logpdf(traj.z[ok]) + traj.delta[ok]
    nll = -float(np.mean(lp))
    w = np.where(ok, -1.0 / n_ok, 0.0)
    a_end = np.zeros_like(traj.z)
    a_end[ok] = w[ok, None] * model.base.grad_logpdf(traj.z[ok])
    _, grad = adjoint_integrate(traj, a_end, w, backend)
    return NLLResult(nll, grad, traj.failed)
