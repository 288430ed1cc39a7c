"""Compare the compiled and numpy local-step kernels.

The per-kernel rows call each backend directly; the engine row goes through
the dispatcher, which sends wide batches to numpy.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times one round of local steps (the engine's hot loop) on the counterexample
quadratic and on a synthetic softmax-regression device, and one full FedAvg
run through the engine with each backend.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedsim import _pykernels, counterexample, datasets

try:
    from fedsim import _ckernels
except ImportError:
    _ckernels = None


def cases():
    prob = counterexample.build(5, 4, 2e-4)
    H = prob.shifted_parts()[0]
    w = np.zeros(prob.dim)
    etas4 = np.full(4, 1e-3)
    yield "quadratic d=21, E=4", "quad_steps", (H, prob.b_parts[0], 1.0, w, etas4)

    dev = datasets.synthetic_power_law(1, 1, 20, 5000, seed=0).devices[0]
    X, y = dev.features, dev.labels.astype(np.int64)
    c = 10
    w = np.zeros(c * X.shape[1] + c)
    rng = np.random.default_rng(0)
    for E, batch in ((5, 10), (20, 10), (5, None)):
        etas = np.full(E, 0.05)
        if batch is None:
            batches = np.tile(np.arange(len(y), dtype=np.int64), (E, 1))
            label = f"logistic n={len(y)}, E={E}, full batch"
        else:
            batches = rng.integers(0, len(y), size=(E, batch), dtype=np.int64)
            label = f"logistic n={len(y)}, E={E}, batch={batch}"
        yield label, "logistic_steps", (X, y, c, 1e-4, 1.0, w, etas, batches)


def per_call(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


ENGINE_SNIPPET = """
import time
from fedsim import datasets, engine
from fedsim.engine import LrSchedule, RunConfig
from fedsim.sampling import Scheme
F = datasets.synthetic_power_law(1, 1, 20, 5000, seed=0).objective(1e-4)
cfg = RunConfig(Scheme.SCHEME_I, 10, 1000, LrSchedule.constant(0.1), K=6, batch_size=10)
t = time.perf_counter()
engine.run_fedavg(F, cfg)
print(time.perf_counter() - t)
"""


def engine_seconds(pure):
    env = dict(os.environ, FEDSIM_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", ENGINE_SNIPPET], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; only the numpy backend is available")
    print(f"{'case':40s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for label, name, fargs in cases():
        py = per_call(getattr(_pykernels, name), fargs, args.repeat) * 1e6
        if _ckernels is None:
            print(f"{label:40s} {py:10.1f} {'-':>10s} {'-':>8s}")
            continue
        cy = per_call(getattr(_ckernels, name), fargs, args.repeat) * 1e6
        print(f"{label:40s} {py:10.1f} {cy:10.1f} {py / cy:7.1f}x")
    py_run = engine_seconds(pure=True)
    line = f"{'engine: 100 rounds, K=6, E=10':40s} {py_run * 1e6:10.0f}"
    if _ckernels is not None:
        cy_run = engine_seconds(pure=False)
        line += f" {cy_run * 1e6:10.0f} {py_run / cy_run:7.1f}x"
    print(line)


if __name__ == "__main__":
    main()
