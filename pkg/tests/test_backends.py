import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcd import _kernels_py as py
from hcd import kernels

compiled = pytest.importorskip("hcd._kernels")


def test_compiled_backend_is_active():
    assert kernels.BACKEND == "compiled"


@given(st.integers(1, 12), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_pairwise_sqdist_bit_identical(n, d, seed):
    z = np.random.default_rng(seed).normal(size=(n, d)) * 10
    a, b = compiled.pairwise_sqdist(z), py.pairwise_sqdist(z)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.diag(a) == 0) and np.array_equal(a, a.T)


conv_shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(3, 9), st.integers(3, 9),
                        st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2))


@given(conv_shapes, st.integers(0, 2**32 - 1))
def test_im2col_and_col2im_bit_identical(shape, seed):
    n, c, h, w, kh, kw, stride, pad = shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, w))
    a, b = compiled.im2col(x, kh, kw, stride, pad), py.im2col(x, kh, kw, stride, pad)
    assert a.tobytes() == b.tobytes()
    cols = rng.normal(size=a.shape)
    a = compiled.col2im(cols, n, c, h, w, kh, kw, stride, pad)
    b = py.col2im(cols, n, c, h, w, kh, kw, stride, pad)
    assert a.tobytes() == b.tobytes()


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6))
    cols = kernels.im2col(x, 3, 3, 2, 1)
    y = rng.normal(size=cols.shape)
    lhs = float(np.sum(cols * y))
    rhs = float(np.sum(x * kernels.col2im(y, x.shape, 3, 3, 2, 1)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_training_step_identical_across_backends():
    script = (
        "from hcd.selftest import erm_equivalence;"
        "from hcd import kernels, oracles;"
        "import numpy as np, hashlib;"
        "from hcd import synthbench;"
        "from hcd.config import ExperimentConfig;"
        "from hcd.trainloop import Trainer;"
        "cfg=ExperimentConfig().with_overrides(data={'n_train':32,'n_test':8},model={'projector_width':16});"
        "tr=Trainer(cfg,0,2);ds=synthbench.generate_split(cfg.data,'train');"
        "tr.train_step(ds.images,ds.y,ds.d,1);"
        "print(kernels.BACKEND, hashlib.sha256(b''.join(p.data.tobytes() for p in tr.params)).hexdigest())"
    )
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, HCD_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", script], env=env, capture_output=True, text=True, check=True)
        backend, digest = res.stdout.split()
        out[backend] = digest
    assert set(out) == {"compiled", "python"}
    assert out["compiled"] == out["python"]
