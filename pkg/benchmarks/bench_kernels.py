"""Compare the compiled MLP kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--threads N]

Times forward (with input Jacobian) and backward passes of the default
32-unit network for several batch sizes, then one full NLL-and-gradient
evaluation with each backend swapped in, and checks the backends agree.
"""

import argparse
import time

import numpy as np

from mflow import _kernels
from mflow import distributions
from mflow.dynamics import FieldParams
from mflow.flow import FlowModel, nll_and_grad
from mflow.geometry import Sphere


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    backends = _kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels are not built; only the numpy fallback is available")
    if args.threads:
        _kernels.set_num_threads(args.threads)

    M = Sphere(2)
    p = FieldParams.init(M, rng=0)
    rng = np.random.default_rng(0)
    print(f"{'op':<22}{'batch':>7}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for n in (200, 2000, 20000):
        x = rng.normal(size=(n, 3))
        go, gj = rng.normal(size=(n, 3)), rng.normal(size=(n, 3, 3))
        for op, fn in (
            ("forward+jacobian", lambda b: b.forward(p.theta, p.sizes, x, 0.5, True)),
            ("backward", lambda b: b.backward(p.theta, p.sizes, x, 0.5, go, gj)),
        ):
            ts = {name: best_of(lambda: fn(b), args.repeat) for name, b in backends.items()}
            row = f"{op:<22}{n:>7}" + "".join(f"{t * 1e3:>10.2f}ms" for t in ts.values())
            if len(ts) == 2:
                row += f"{ts['python'] / ts['compiled']:>9.1f}x"
            print(row)

    target = distributions.target_from_name("c1-sph2")
    model = FlowModel.create(M, rng=1)
    batch = target.sample(200, rng)
    results = {}
    for name, b in backends.items():
        _kernels.backend = b
        t = best_of(lambda: nll_and_grad(model, batch), max(1, args.repeat // 2))
        results[name] = (t, nll_and_grad(model, batch))
    row = f"{'nll_and_grad':<22}{200:>7}" + "".join(f"{t * 1e3:>10.0f}ms" for t, _ in results.values())
    if len(results) == 2:
        row += f"{results['python'][0] / results['compiled'][0]:>9.1f}x"
        (_, a), (_, b) = results["python"], results["compiled"]
        gap = np.abs(a.grad - b.grad).max() / np.abs(a.grad).max()
        print(row)
        print(f"backend agreement: |nll diff| {abs(a.nll - b.nll):.1e}, max rel grad diff {gap:.1e}")
    else:
        print(row)


if __name__ == "__main__":
    main()
