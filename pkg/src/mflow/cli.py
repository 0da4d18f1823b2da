"""Command-line interface: ``mflow {train,sample,density-grid,check}``.

Global flags (accepted before or after the subcommand): ``--seed``, ``--out``,
``--config`` and ``--threads`` (falls back to ``MFLOW_THREADS``). A config
file is a flat JSON object; keys are option names, optionally prefixed with
the command (``"train.lr": 0.002``). Flags given on the command line win.

Exit codes:
    0  success
    1  check suite reported failures, or an unexpected error
    2  usage or configuration error
    3  numeric failure during training or integration
    4  corrupted checkpoint
    5  output directory locked by another run
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from contextlib import contextmanager

import numpy as np

from . import __version__, _kernels
from .distributions import TARGET_NAMES, Density, density_from_dict, target_from_name
from .errors import ChecksumError, MflowError, NumericError, TrainingError
from .flow import load_model, mcnf_logprob, mcnf_sample
from .geometry import Hyperboloid, Sphere, get_manifold, manifold_name
from .training import TrainConfig, train_density, write_json

log = logging.getLogger("mflow")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECKSUM, EXIT_LOCKED = 0, 1, 2, 3, 4, 5

SAMPLE_PROJ = ("proj_x", "proj_y", "logp")
GRID_HEADER = ("proj_x", "proj_y", "logp", "volume", "flag")

GLOBAL_DEFAULTS = {"seed": 0, "out": "mflow-out", "threads": None}

TRAIN_DEFAULTS = {
    "manifold": None,
    "target": None,
    "base": None,
    "budget": 100_000,
    "batch_size": 200,
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps_adam": 1e-8,
    "charts": 1,
    "steps": 20,
    "policy": "fixed",
    "chart_eps": 0.1,
    "mode": None,
    "hidden": 32,
    "layers": 4,
    "backend": "chart",
    "speed_limit": None,
    "eval_every": 0,
    "n_mc": 10_000,
    "wall_time": False,
}
SAMPLE_DEFAULTS = {"checkpoint": None, "target": None, "n": 1000}
GRID_DEFAULTS = {"checkpoint": None, "target": None, "resolution": 200, "res_phi": 200, "res_theta": 100}
CHECK_DEFAULTS = {"fast": False, "suite": None}

COMMAND_DEFAULTS = {
    "train": TRAIN_DEFAULTS,
    "sample": SAMPLE_DEFAULTS,
    "density-grid": GRID_DEFAULTS,
    "check": CHECK_DEFAULTS,
}


class UsageError(Exception):
    shown_usage = False


class LockedError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        exc = UsageError(message)
        exc.shown_usage = True
        raise exc


def _add_globals(p):
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="random seed (default 0)")
    p.add_argument("--out", default=S, help="output directory (default ./mflow-out)")
    p.add_argument("--config", default=S, help="JSON config file with flat dotted keys")
    p.add_argument("--threads", type=int, default=S, help="kernel threads (env MFLOW_THREADS)")
    p.add_argument("-q", "--quiet", action="store_true", default=S, help="only print errors")


def build_parser():
    S = argparse.SUPPRESS
    parser = _Parser(prog="mflow", description="Manifold continuous normalizing flows.")
    parser.add_argument("--version", action="version", version=f"mflow {__version__}")
    _add_globals(parser)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="fit a flow to a target density")
    _add_globals(t)
    t.add_argument("--manifold", default=S, help="h2 or s2 (checked against the target)")
    t.add_argument("--target", default=S, help=f"target name ({', '.join(TARGET_NAMES)}) or JSON spec file")
    t.add_argument("--base", default=S, help="base density name or JSON spec file")
    t.add_argument("--budget", type=int, default=S, help="training samples (default 100000)")
    t.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--beta1", type=float, default=S)
    t.add_argument("--beta2", type=float, default=S)
    t.add_argument("--eps-adam", dest="eps_adam", type=float, default=S)
    t.add_argument("--charts", type=int, default=S, help="chart segments K (default 1)")
    t.add_argument("--steps", type=int, default=S, help="RK4 steps per segment (default 20)")
    t.add_argument("--policy", choices=("fixed", "adaptive"), default=S)
    t.add_argument("--chart-eps", dest="chart_eps", type=float, default=S)
    t.add_argument("--mode", choices=("ambient_projected", "tangent_direct"), default=S)
    t.add_argument("--hidden", type=int, default=S)
    t.add_argument("--layers", type=int, default=S)
    t.add_argument("--backend", choices=("chart", "ambient"), default=S)
    t.add_argument("--speed-limit", dest="speed_limit", type=float, default=S)
    t.add_argument("--eval-every", dest="eval_every", type=int, default=S, help="samples between evaluations")
    t.add_argument("--n-mc", dest="n_mc", type=int, default=S, help="evaluation draws (default 10000)")
    t.add_argument("--wall-time", dest="wall_time", action="store_true", default=S,
                   help="record wall time (makes outputs run-dependent)")

    s = sub.add_parser("sample", help="draw samples from a trained flow")
    _add_globals(s)
    s.add_argument("--checkpoint", default=S, help="checkpoint (default OUT/checkpoint.bin)")
    s.add_argument("--target", default=S, help="sample a named target instead of a checkpoint")
    s.add_argument("--n", type=int, default=S, help="number of samples (default 1000)")

    g = sub.add_parser("density-grid", help="log-density on a plotting grid")
    _add_globals(g)
    g.add_argument("--checkpoint", default=S, help="checkpoint (default OUT/checkpoint.bin)")
    g.add_argument("--target", default=S, help="grid a named target instead of a checkpoint")
    g.add_argument("--resolution", type=int, default=S, help="Poincare grid points per axis on h2 (default 200)")
    g.add_argument("--res-phi", dest="res_phi", type=int, default=S, help="longitude points on s2 (default 200)")
    g.add_argument("--res-theta", dest="res_theta", type=int, default=S, help="colatitude points on s2 (default 100)")

    c = sub.add_parser("check", help="run the invariant suites")
    _add_globals(c)
    c.add_argument("--fast", action="store_true", default=S, help="reduced case counts")
    c.add_argument("--suite", action="append", default=S, help="run only this suite (repeatable)")
    return parser


def resolve_config(args: argparse.Namespace, command: str) -> dict:
    """Defaults, then config file values, then explicit flags."""
    cfg = dict(GLOBAL_DEFAULTS)
    cfg.update(COMMAND_DEFAULTS[command])
    given = vars(args)
    path = given.get("config")
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for key, val in raw.items():
            cmd, _, name = key.rpartition(".")
            name = name.replace("-", "_")
            if cmd and cmd != command:
                continue
            if name not in cfg:
                raise UsageError(f"unknown config key {key!r}")
            cfg[name] = val
    for key, val in given.items():
        if key in cfg:
            cfg[key] = val
    if cfg["threads"] is None and os.environ.get("MFLOW_THREADS"):
        try:
            cfg["threads"] = int(os.environ["MFLOW_THREADS"])
        except ValueError:
            raise UsageError("MFLOW_THREADS must be an integer") from None
    cfg["command"] = command
    return cfg


@contextmanager
def output_lock(out):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, ".mflow.lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out} is in use by another run (remove {path} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(path)


def _load_density(spec) -> Density:
    if isinstance(spec, dict):
        return density_from_dict(spec)
    if isinstance(spec, str) and spec.endswith(".json"):
        with open(spec) as fh:
            return density_from_dict(json.load(fh))
    return target_from_name(spec)


def _density_field(spec):
    # keep names as names so the report stays readable
    if isinstance(spec, str) and spec.endswith(".json"):
        return _load_density(spec).to_dict()
    return spec


def _fmt(v):
    v = float(v)
    return repr(v) if math.isfinite(v) or math.isinf(v) else "nan"


def _projection(M, x):
    if isinstance(M, Hyperboloid) and M.dim == 2:
        return M.stereographic(x)
    if isinstance(M, Sphere) and M.dim == 2:
        return M.mollweide(x)
    raise UsageError("plot projections are defined for h2 and s2")


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg) -> int:
    if not cfg["target"]:
        raise UsageError("train needs --target")
    try:
        target = _load_density(cfg["target"])
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from None
    if cfg["manifold"] and get_manifold(cfg["manifold"]) != target.manifold:
        raise UsageError(f"target lives on {manifold_name(target.manifold)}, not {cfg['manifold']}")
    try:
        tc = TrainConfig(
            target=_density_field(cfg["target"]),
            base=_density_field(cfg["base"]),
            batch_size=cfg["batch_size"],
            max_samples=cfg["budget"],
            lr=cfg["lr"],
            beta1=cfg["beta1"],
            beta2=cfg["beta2"],
            eps_adam=cfg["eps_adam"],
            seed=cfg["seed"],
            eval_every=cfg["eval_every"],
            n_mc=cfg["n_mc"],
            steps_per_segment=cfg["steps"],
            num_charts=cfg["charts"],
            chart_policy=cfg["policy"],
            chart_eps=cfg["chart_eps"],
            mode=cfg["mode"],
            hidden=cfg["hidden"],
            num_layers=cfg["layers"],
            backend=cfg["backend"],
            speed_limit=cfg["speed_limit"],
            out_dir=cfg["out"],
            wall_time=bool(cfg["wall_time"]),
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None

    def progress(row):
        if row.get("kl") is not None:
            log.info("step %d  samples %d  nll %.4f  kl %.4f", row["step"], row["samples"], row["nll"], row["kl"])

    report = train_density(tc, progress)
    f = report.final
    log.info("done: %d steps, nll %.4f, kl %.4f +- %.4f", len(report.losses), f["nll"], f["kl"], f["stderr"])
    if report.flagged:
        log.error("training stopped early: %s", report.message)
        return EXIT_NUMERIC
    return EXIT_OK


def _model_or_target(cfg):
    if cfg["target"]:
        try:
            return None, _load_density(cfg["target"])
        except (ValueError, OSError) as exc:
            raise UsageError(str(exc)) from None
    path = cfg["checkpoint"] or os.path.join(cfg["out"], "checkpoint.bin")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint {path} not found (train first or pass --target)")
    return load_model(path), None


def cmd_sample(cfg) -> int:
    if cfg["n"] < 1:
        raise UsageError("--n must be >= 1")
    model, target = _model_or_target(cfg)
    rng = np.random.default_rng(cfg["seed"])
    if model is not None:
        M = model.manifold
        x, lp = mcnf_sample(model, cfg["n"], rng, allow_failures=True)
    else:
        M = target.manifold
        x = target.sample(cfg["n"], rng)
        lp = target.logpdf(x)
    proj = _projection(M, x)
    with open(os.path.join(cfg["out"], "samples.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(M.ambient_dim)] + list(SAMPLE_PROJ))
        for xi, pi, li in zip(x, proj, lp):
            w.writerow([_fmt(v) for v in xi] + [_fmt(pi[0]), _fmt(pi[1]), _fmt(li)])
    return EXIT_OK


def poincare_grid(resolution):
    """Cell-centred square grid on [-1, 1]^2; returns points, cell area and an inside mask."""
    c = -1 + (np.arange(resolution) + 0.5) * 2.0 / resolution
    X, Y = np.meshgrid(c, c, indexing="ij")
    p = np.stack([X.ravel(), Y.ravel()], axis=-1)
    inside = np.sum(p * p, axis=-1) < 1.0
    return p, (2.0 / resolution) ** 2, inside


def sphere_grid(res_phi, res_theta):
    phi = (np.arange(res_phi) + 0.5) * 2 * math.pi / res_phi
    theta = (np.arange(res_theta) + 0.5) * math.pi / res_theta
    P, T = np.meshgrid(phi, theta, indexing="ij")
    st = np.sin(T.ravel())
    x = np.stack([st * np.cos(P.ravel()), st * np.sin(P.ravel()), np.cos(T.ravel())], axis=-1)
    vol = st * (2 * math.pi / res_phi) * (math.pi / res_theta)
    return x, vol


def cmd_density_grid(cfg) -> int:
    model, target = _model_or_target(cfg)
    M = model.manifold if model is not None else target.manifold
    if isinstance(M, Hyperboloid) and M.dim == 2:
        if cfg["resolution"] < 2:
            raise UsageError("--resolution must be >= 2")
        p, cell, inside = poincare_grid(cfg["resolution"])
        proj = p
        x = M.from_poincare(p[inside])
        vol = np.zeros(len(p))
        sq = np.sum(p[inside] ** 2, axis=-1)
        vol[inside] = cell * (2.0 / (1.0 - sq)) ** 2
    elif isinstance(M, Sphere) and M.dim == 2:
        if cfg["res_phi"] < 1 or cfg["res_theta"] < 1:
            raise UsageError("grid resolutions must be >= 1")
        x, vol = sphere_grid(cfg["res_phi"], cfg["res_theta"])
        inside = np.ones(len(x), dtype=bool)
        proj = M.mollweide(x)
    else:
        raise UsageError("density grids are defined for h2 and s2")

    lp = np.full(len(proj), np.nan)
    flag = np.where(inside, "ok", "outside").astype(object)
    if model is not None:
        vals, failed = mcnf_logprob(model, x, allow_failures=True, return_failed=True)
        vals = np.where(failed, np.nan, vals)
        idx = np.flatnonzero(inside)
        lp[idx] = vals
        flag[idx[failed]] = "failed"
    else:
        lp[inside] = target.logpdf(x)
    with open(os.path.join(cfg["out"], "grid.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for i in range(len(proj)):
            ok = flag[i] == "ok"
            w.writerow([_fmt(proj[i, 0]), _fmt(proj[i, 1]), _fmt(lp[i]) if ok else "", _fmt(vol[i]), flag[i]])
    return EXIT_OK


def cmd_check(cfg) -> int:
    from .checks import SUITES, run_checks

    only = cfg["suite"]
    if only:
        unknown = set(only) - set(SUITES)
        if unknown:
            raise UsageError(f"unknown suite(s) {', '.join(sorted(unknown))}; choose from {', '.join(SUITES)}")
    results = run_checks(bool(cfg["fast"]), only)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.suite:<13} {r.name:<{width}}  {r.detail}")
    n_bad = sum(not r.ok for r in results)
    print(f"{len(results) - n_bad}/{len(results)} checks passed")
    write_json(os.path.join(cfg["out"], "check.json"), {
        "passed": n_bad == 0,
        "results": [{"suite": r.suite, "name": r.name, "ok": bool(r.ok), "detail": r.detail} for r in results],
    })
    return EXIT_OK if n_bad == 0 else EXIT_FAIL


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "density-grid": cmd_density_grid, "check": cmd_check}
CONFIG_NAMES = {"train": "train-config.json", "sample": "sample-config.json",
                "density-grid": "grid-config.json", "check": "check-config.json"}


def main(argv=None) -> int:
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.ERROR if getattr(args, "quiet", False) else logging.INFO,
                            format="%(message)s", stream=sys.stderr)
        cfg = resolve_config(args, args.command)
        if cfg["threads"] is not None:
            _kernels.set_num_threads(cfg["threads"])
        with output_lock(cfg["out"]):
            # written before the run so a crashed run still records what it was asked to do
            write_json(os.path.join(cfg["out"], CONFIG_NAMES[args.command]),
                       {k: v for k, v in cfg.items() if k != "config"})
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        if not exc.shown_usage and args is not None and args.command:
            parser._subparsers._group_actions[0].choices[args.command].print_usage(sys.stderr)
        print(f"mflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LockedError as exc:
        print(f"mflow: error: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except ChecksumError as exc:
        print(f"mflow: corrupted checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKSUM
    except (NumericError, TrainingError) as exc:
        print(f"mflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MflowError as exc:
        print(f"mflow: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
