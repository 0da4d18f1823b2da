"""Adam training loop for density estimation and Monte-Carlo evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .distributions import (
    Density,
    antipodal_base,
    default_base,
    density_from_dict,
    target_from_name,
    target_logpdf,
)
from .dynamics import FieldMode
from .errors import TrainingError
from .flow import FlowModel, mcnf_logprob, nll_and_grad, save_model
from .solvers import ChartPolicy, ChartPolicyKind, TimeGrid


@dataclass(frozen=True)
class AdamState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def init(cls, params):
        p = np.array(params, dtype=float)
        return cls(p, np.zeros_like(p), np.zeros_like(p), 0)


def adam_step(state: AdamState, grad, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """One bias-corrected Adam update. Returns a new state; the input is untouched."""
    g = np.asarray(grad, dtype=float)
    if g.shape != state.params.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {state.params.shape}")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise TrainingError(
            f"non-finite gradient at step {state.step + 1}: {bad.size} entries, first index {bad[0]}"
        )
    k = state.step + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    mhat = m / (1 - beta1 ** k)
    vhat = v / (1 - beta2 ** k)
    p = state.params - lr * mhat / (np.sqrt(vhat) + eps)
    return AdamState(p, m, v, k)


@dataclass(frozen=True)
class TrainConfig:
    target: str | dict = "c1-row1"
    base: str | dict | None = None
    batch_size: int = 200
    max_samples: int = 100_000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # in samples; 0 means only at the end
    n_mc: int = 10_000
    steps_per_segment: int = 20
    num_charts: int = 1
    chart_policy: str = "fixed"
    chart_eps: float = 0.1
    mode: str | None = None
    hidden: int = 32
    num_layers: int = 4
    backend: str = "chart"
    speed_limit: float | None = None
    out_dir: str | None = None
    wall_time: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_samples < self.batch_size:
            raise ValueError("max_samples must be at least batch_size")
        if self.n_mc < 2:
            raise ValueError("n_mc must be >= 2")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        ChartPolicyKind(self.chart_policy)
        if self.mode is not None:
            FieldMode(self.mode)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _density(spec) -> Density:
    if isinstance(spec, Density):
        return spec
    if isinstance(spec, str):
        return target_from_name(spec)
    return density_from_dict(spec)


def resolve_base(config: TrainConfig, target: Density) -> Density:
    if config.base is not None:
        if config.base == "appd-base":
            return antipodal_base()
        return _density(config.base)
    if config.target == "appd-antipodal":
        return antipodal_base()
    return default_base(target.manifold)


def build_model(config: TrainConfig, target: Density, rng) -> FlowModel:
    return FlowModel.create(
        target.manifold,
        base=resolve_base(config, target),
        mode=FieldMode(config.mode) if config.mode else None,
        grid=TimeGrid(0.0, 1.0, config.steps_per_segment, config.num_charts),
        policy=ChartPolicy(ChartPolicyKind(config.chart_policy), config.chart_eps),
        hidden=config.hidden,
        num_layers=config.num_layers,
        rng=rng,
        speed_limit=config.speed_limit,
    )


@dataclass
class EvalResult:
    nll: float
    kl: float
    stderr: float
    entropy: float
    failures: int = 0

    def __iter__(self):
        yield self.nll
        yield self.kl
        yield self.entropy


def eval_metrics(model: FlowModel, target, n_mc=10_000, rng=None) -> EvalResult:
    """Mean NLL, KL(target || model) with its standard error, and target entropy.

    Uses ``n_mc`` draws from the target. Points the model cannot map back to
    the base get log-density ``-inf`` and count as failures, which makes the
    NLL and KL infinite.
    """
    target = _density(target)
    rng = np.random.default_rng(rng)
    x = target.sample(n_mc, rng)
    lt, _ = target_logpdf(target, x)
    lm, failed = mcnf_logprob(model, x, allow_failures=True, return_failed=True)
    d = lt - lm
    n = x.shape[0]
    if failed.any():
        kl = stderr = math.inf
    else:
        kl = float(np.mean(d))
        stderr = float(np.std(d, ddof=1) / math.sqrt(n))
    return EvalResult(float(-np.mean(lm)), kl, stderr, float(-np.mean(lt)), int(failed.sum()))


@dataclass
class TrainReport:
    config: dict
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    checkpoint: str | None = None
    flagged: bool = False
    message: str = ""
    final: dict | None = None
    model: FlowModel | None = None

    def to_dict(self):
        return {
            "config": self.config,
            "records": self.records,
            "final": self.final,
            "checkpoint": self.checkpoint,
            "flagged": self.flagged,
            "message": self.message,
            "steps": len(self.losses),
        }


LOSS_HEADER = ("step", "samples", "nll", "kl", "stderr", "seconds")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_loss_csv(path, losses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_HEADER)
        for row in losses:
            w.writerow([_fmt(row.get(k)) for k in LOSS_HEADER])


def _json_safe(x):
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def train_density(config: TrainConfig, progress=None) -> TrainReport:
    """Fit a flow to ``config.target`` by maximum likelihood with Adam.

    Every optimization step draws a fresh batch. The random streams for
    initialization, batches and evaluation are derived from ``config.seed``,
    and the evaluation draws are identical at every evaluation, so the
    reported numbers are reproducible bit for bit. Wall time is only recorded
    when ``config.wall_time`` is set.
    """
    target = _density(config.target)
    init_ss, batch_ss, eval_ss = np.random.SeedSequence(config.seed).spawn(3)
    model = build_model(config, target, np.random.default_rng(init_ss))
    batch_rng = np.random.default_rng(batch_ss)
    state = AdamState.init(model.params.theta)
    report = TrainReport(config.to_dict())
    t0 = time.perf_counter()
    n_steps = config.max_samples // config.batch_size

    def evaluate(step, samples):
        ev = eval_metrics(model.with_theta(state.params), target, config.n_mc, np.random.default_rng(eval_ss))
        rec = {
            "step": step,
            "samples": samples,
            "nll": ev.nll,
            "kl": ev.kl,
            "stderr": ev.stderr,
            "entropy": ev.entropy,
            "failures": ev.failures,
            "seconds": round(time.perf_counter() - t0, 3) if config.wall_time else None,
        }
        report.records.append(rec)
        return rec

    last_eval = 0
    for step in range(1, n_steps + 1):
        samples = step * config.batch_size
        batch = target.sample(config.batch_size, batch_rng)
        res = nll_and_grad(model.with_theta(state.params), batch, config.backend, allow_failures=True)
        row = {"step": step, "samples": samples, "nll": res.nll,
               "seconds": round(time.perf_counter() - t0, 3) if config.wall_time else None}
        report.losses.append(row)
        try:
            if not math.isfinite(res.nll):
                raise TrainingError(f"non-finite loss at step {step} ({int(res.failed.sum())} failed rows)")
            state = adam_step(state, res.grad, config.lr, config.beta1, config.beta2, config.eps_adam)
        except TrainingError as exc:
            report.flagged = True
            report.message = str(exc)
            break
        if config.eval_every and samples - last_eval >= config.eval_every and step < n_steps:
            last_eval = samples
            rec = evaluate(step, samples)
            row.update(kl=rec["kl"], stderr=rec["stderr"])
        if progress:
            progress(row)

    done = report.losses[-1]["step"] if report.losses else 0
    rec = evaluate(done, done * config.batch_size)
    if report.losses:
        report.losses[-1].update(kl=rec["kl"], stderr=rec["stderr"])
    report.final = dict(rec)
    report.model = model.with_theta(state.params)

    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        save_model(os.path.join(config.out_dir, "checkpoint.bin"), report.model)
        report.checkpoint = "checkpoint.bin"
        write_loss_csv(os.path.join(config.out_dir, "loss.csv"), report.losses)
        write_json(os.path.join(config.out_dir, "report.json"), report.to_dict())
    return report


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
