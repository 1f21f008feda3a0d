"""Compare the numba and pure-numpy kernels.

    python benchmarks/bench_kernels.py [--batch 1024] [--repeats 20]

Reports the best-of-N wall time of each kernel in both implementations and
the speedup, plus the time of the public entry point, which picks one of
the two by batch size. With ``DIFFTD_NUMBA=0`` numba is not imported, so only the
numpy column is measured.
"""

import argparse
import time

import numpy as np

from difftd._accel import USE_NUMBA
from difftd.kernels import linear_sde
from difftd.kernels import mlp as kern
from difftd.value_models import MlpValue


def best_time(fn, repeats):
    fn()  # compile / warm caches
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def mlp_cases(n, hidden, batch, rng):
    model = MlpValue(n, hidden, seed=0)
    model.set_params(0.3 * rng.normal(size=model.params.shape))
    th, w = model.params, model.widths
    S, U, C = rng.normal(size=(batch, n)), rng.normal(size=(batch, n)), rng.normal(size=(batch, 3))
    for name in ("value", "grad", "hvp", "jet", "jet_param_grad"):
        args = {"value": (th, w, S), "grad": (th, w, S), "hvp": (th, w, S, U), "jet": (th, w, S, U),
                "jet_param_grad": (th, w, S, U, C)}[name]
        public = getattr(kern, "grad_s" if name == "grad" else "hvp_s" if name == "hvp" else name)
        yield (f"mlp {name} n={n}", getattr(kern, f"_{name}_numba"), getattr(kern, f"_{name}_numpy"), public, args)


def linear_case(n, batch, steps, rng):
    A = -np.eye(n) + 0.1 * rng.normal(size=(n, n))
    mats = (A, np.eye(n), 0.1 * rng.normal(size=(n, n)), 0.1 * np.eye(n), 0.1 * np.eye(n), np.eye(n), np.eye(n))
    S0 = rng.normal(size=(batch, n))
    Zs, Za = rng.normal(size=(steps, batch, n)), rng.normal(size=(steps, batch, n))

    def call(fn):
        def run():
            fn(S0.copy(), S0.copy(), *mats, Zs, Za, 0.01, 1.0, 0, np.zeros(batch), np.zeros(batch), np.zeros(batch))
        return run
    return f"linear_sde chunk n={n} steps={steps}", call


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--repeats", type=int, default=20)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    for n in (2, 16, 64):
        for label, fast, slow, public, a in mlp_cases(n, (64, 64), args.batch, rng):
            t_np = best_time(lambda: slow(*a), args.repeats)
            t_nb = best_time(lambda: fast(*a), args.repeats) if USE_NUMBA else float("nan")
            rows.append((label, t_nb, t_np, best_time(lambda: public(*a), args.repeats)))
    for n in (1, 4):
        label, call = linear_case(n, args.batch, 256, rng)
        t_np = best_time(call(linear_sde._chunk_numpy), args.repeats)
        t_nb = best_time(call(linear_sde._chunk_numba), args.repeats) if USE_NUMBA else float("nan")
        rows.append((label, t_nb, t_np, best_time(call(linear_sde.discounted_chunk), args.repeats)))
    print(f"batch={args.batch} repeats={args.repeats} numba={'on' if USE_NUMBA else 'off'}")
    print(f"{'kernel':<36}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}{'used ms':>12}")
    for label, t_nb, t_np, t_used in rows:
        print(f"{label:<36}{t_nb * 1e3:>12.3f}{t_np * 1e3:>12.3f}{t_np / t_nb:>10.2f}{t_used * 1e3:>12.3f}")


if __name__ == "__main__":
    main()
