"""Compiled kernels vs the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Checks that both backends agree bit for bit on every case, then prints the
best-of-N wall time per call and the speed-up. Also times one full training
step per backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from hcd import _kernels_py

try:
    from hcd import _kernels
except ImportError:
    _kernels = None

CASES = {
    "pairwise_sqdist 32x32": ("pairwise_sqdist", lambda r: (r.normal(size=(32, 32)),)),
    "pairwise_sqdist 256x32": ("pairwise_sqdist", lambda r: (r.normal(size=(256, 32)),)),
    "im2col 32x3x16x16 s2 p0": ("im2col", lambda r: (r.normal(size=(32, 3, 16, 16)), 3, 3, 2, 0)),
    "im2col 32x16x7x7 s2 p1": ("im2col", lambda r: (r.normal(size=(32, 16, 7, 7)), 3, 3, 2, 1)),
    "col2im 32x16x7x7 s2 p1": ("col2im", lambda r: (r.normal(size=(32 * 16, 16 * 9)), 32, 16, 7, 7, 3, 3, 2, 1)),
}

STEP_SNIPPET = """
import time
from hcd import kernels, synthbench
from hcd.config import ExperimentConfig
from hcd.trainloop import Trainer
cfg = ExperimentConfig().with_overrides(data={"n_train": 64, "n_test": 1})
data = synthbench.generate_split(cfg.data, "train")
X, y, d = data.images[:32], data.y[:32], data.d[:32]
tr = Trainer(cfg, 0, 2)
times = []
for _ in range(REPEAT + 1):
    t0 = time.perf_counter()
    tr.train_step(X, y, d, 3)
    times.append(time.perf_counter() - t0)
print(kernels.BACKEND, min(times[1:]))
"""


def bench(repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'case':28s} {'python (ms)':>12s} {'compiled (ms)':>14s} {'speed-up':>9s}")
    for label, (name, make) in CASES.items():
        args = make(rng)
        py = getattr(_kernels_py, name)
        t_py = min(timeit.repeat(lambda: py(*args), number=20, repeat=repeat)) / 20
        if _kernels is None:
            print(f"{label:28s} {1e3 * t_py:12.3f} {'n/a':>14s} {'':>9s}")
            continue
        cy = getattr(_kernels, name)
        if not np.array_equal(py(*args), cy(*args)):
            raise SystemExit(f"{label}: backends disagree")
        t_cy = min(timeit.repeat(lambda: cy(*args), number=20, repeat=repeat)) / 20
        print(f"{label:28s} {1e3 * t_py:12.3f} {1e3 * t_cy:14.3f} {t_py / t_cy:8.2f}x")

    print("\nfull HCD training step (batch 32):")
    for pure in ("1", "0"):
        env = dict(os.environ, HCD_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.replace("REPEAT", str(repeat))],
                             env=env, capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:9s} {1e3 * float(out[1]):8.1f} ms")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    bench(p.parse_args().repeat)
