"""Compare the compiled and NumPy sequence kernels.

    python3 benchmarks/bench_kernel.py [--units 7 64 256] [--steps 200]

For each model size the same sequence is run through both backends, with
and without learning; the script reports milliseconds per time step, the
speedup and the largest difference in the resulting per-step NLL.
"""

import argparse
import time

import numpy as np

from dybm.backend import get_backend
from dybm.core import ModelConfig, init_model
from dybm.trainer import OptimizerState


def time_run(kernel, model, steps, learn, repeats):
    best, nll = float("inf"), None
    for _ in range(repeats):
        m = model.copy()
        opt = OptimizerState(m.params)
        t0 = time.perf_counter()
        nll, _ = m.run(steps, learn=learn, adam=opt.kernel_args(), lr=1e-3, kernel=kernel)
        best = min(best, time.perf_counter() - t0)
    return best / len(steps), nll


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--units", type=int, nargs="+", default=[7, 64, 256])
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)
    try:
        compiled = get_backend("compiled")
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e .` first")
    python = get_backend("python")
    rng = np.random.default_rng(0)
    print(f"{'N':>5} {'mode':>8} {'compiled ms':>12} {'python ms':>10} {'speedup':>8} "
          f"{'max |dNLL|':>11}")
    for n in args.units:
        model = init_model(ModelConfig(n_units=n, rng_seed=1))
        steps = (rng.random((args.steps, n)) < 0.3).astype(np.float64)
        for learn in (False, True):
            tc, nc = time_run(compiled, model, steps, learn, args.repeats)
            tp, npy = time_run(python, model, steps, learn, args.repeats)
            mode = "learn" if learn else "forward"
            print(f"{n:>5} {mode:>8} {1e3 * tc:>12.4f} {1e3 * tp:>10.4f} {tp / tc:>8.1f} "
                  f"{float(np.max(np.abs(nc - npy))):>11.2e}")


if __name__ == "__main__":
    main()
