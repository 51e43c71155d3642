"""The numba and numpy twins of every kernel must agree."""

import os
import subprocess
import sys

import numpy as np
import pytest

from moextend import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@pytest.mark.parametrize("seed", range(5))
def test_topk_rows_identical(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, size=(50, 5)).astype(np.float64)  # many ties
    for k in range(1, 6):
        assert np.array_equal(K.np_topk_rows(x, k), K.nb_topk_rows(x, k))


def test_index_add_rows_accumulates_duplicates():
    rng = np.random.default_rng(0)
    rows = np.array([0, 2, 2, 1, 0, 2])
    src = rng.normal(size=(6, 3))
    a, b = np.zeros((3, 3)), np.zeros((3, 3))
    K.np_index_add_rows(a, rows, src)
    K.nb_index_add_rows(b, rows, src)
    assert np.allclose(a, b, rtol=0, atol=1e-15)
    assert np.allclose(a[2], src[1] + src[2] + src[5])


@pytest.mark.parametrize("name", ["gelu_tanh", "gelu_tanh_grad", "gelu_erf", "gelu_erf_grad"])
def test_gelu_twins_agree(name):
    x = np.linspace(-30, 30, 4001).reshape(1, -1)
    a, b = getattr(K, "np_" + name)(x), getattr(K, "nb_" + name)(x)
    # exp-based tanh saturates to exactly +-1 slightly earlier than libm
    assert np.allclose(a, b, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_ordered_matmul_twins_identical_and_column_local(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(9, 13)), rng.normal(size=(13, 4))
    a, b = K.np_ordered_matmul(x, w), K.nb_ordered_matmul(x, w)
    assert np.array_equal(a, b)
    assert np.allclose(a, x @ w, atol=1e-12)
    wide = np.concatenate([w, w[:, 2:3], rng.normal(size=(13, 2))], axis=1)
    for f in (K.np_ordered_matmul, K.nb_ordered_matmul):
        out = f(x, wide)
        assert np.array_equal(out[:, :4], a) and np.array_equal(out[:, 4], out[:, 2])


def test_count_selections_identical():
    idx = np.random.default_rng(1).integers(0, 5, size=(40, 2))
    assert np.array_equal(K.np_count_selections(idx, 5), K.nb_count_selections(idx, 5))


def test_layernorm_twins_agree():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(7, 9))
    xa, ra = K.np_layernorm_fwd(x, 1e-5)
    xb, rb = K.nb_layernorm_fwd(x, 1e-5)
    assert np.allclose(xa, xb, atol=1e-13) and np.allclose(ra, rb, rtol=1e-13)
    g = rng.normal(size=x.shape)
    assert np.allclose(K.np_layernorm_bwd(g, xa, ra), K.nb_layernorm_bwd(g, xa, ra), atol=1e-13)


@pytest.mark.parametrize("lr,wd", [(1e-3, 0.0), (1e-2, 0.1), (0.0, 0.0)])
def test_adamw_twins_agree(lr, wd):
    rng = np.random.default_rng(3)
    p0, g = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    states = []
    for fn in (K.np_adamw_update, K.nb_adamw_update):
        p, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
        for _ in range(3):
            fn(p, g, m, v, lr, 0.9, 0.999, 0.1, 0.001, 1e-8, wd)
        states.append((p, m, v))
    for a, b in zip(*states):
        assert np.allclose(a, b, rtol=1e-13, atol=1e-15)
    if lr == 0.0:
        assert np.array_equal(states[0][0], p0)


def test_adamw_non_contiguous_falls_back():
    base = np.random.default_rng(4).normal(size=(4, 6))
    p = base[:, ::2]
    g = np.ones_like(p)
    m, v = np.zeros_like(p), np.zeros_like(p)
    K.nb_adamw_update(p, g, m, v, 1e-2, 0.9, 0.999, 0.1, 0.001, 1e-8, 0.0)
    assert np.all(base[:, ::2] != np.random.default_rng(4).normal(size=(4, 6))[:, ::2])


def test_env_flag_selects_numpy_path():
    code = "from moextend import _kernels as K; print(K.USE_NUMBA)"
    for flag, want in (("0", "False"), ("1", "True")):
        out = subprocess.run([sys.executable, "-c", code], env={**os.environ, "MOEXTEND_NUMBA": flag},
                             capture_output=True, text=True, check=True).stdout.strip()
        assert out == want
