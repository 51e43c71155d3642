"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin. ``MOEXTEND_NUMBA=0`` forces the numpy
path; any other value (or unset) uses numba if it imports. Both paths must
agree bit-for-bit on selection kernels and to rounding on float kernels.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _flag_enabled() -> bool:
    return os.environ.get("MOEXTEND_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _flag_enabled()

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------- numpy path


def np_topk_rows(x: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values keeps lower indices first among ties
    return np.argsort(-x, axis=1, kind="stable")[:, :k].astype(np.int64)


def np_ordered_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = x[:, :1] * w[0]
    for i in range(1, x.shape[1]):
        out += x[:, i : i + 1] * w[i]
    return out


def np_index_add_rows(out: np.ndarray, rows: np.ndarray, src: np.ndarray) -> None:
    np.add.at(out, rows, src)


def np_gelu_tanh(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + _GELU_C * x**3)))


def np_gelu_tanh_grad(x: np.ndarray) -> np.ndarray:
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x**3)
    t = np.tanh(u)
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def _erf(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    return erf(x)


def np_gelu_erf(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + _erf(x * _INV_SQRT2))


def np_gelu_erf_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + _erf(x * _INV_SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def np_count_selections(idx: np.ndarray, m: int) -> np.ndarray:
    return np.bincount(idx.ravel(), minlength=m).astype(np.int64)


def np_layernorm_fwd(x2: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    mu = x2.mean(axis=1, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def np_layernorm_bwd(gxhat: np.ndarray, xhat: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    return (gxhat - m1 - xhat * m2) * rstd[:, None]


def np_adamw_update(p, g, m, v, lr, b1, b2, c1, c2, eps, wd):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    if lr == 0.0:
        return
    if wd:
        p *= 1.0 - lr * wd
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def nb_topk_rows(x, k):
        n, m = x.shape
        out = np.empty((n, k), dtype=np.int64)
        taken = np.zeros(m, dtype=np.bool_)
        for r in range(n):
            taken[:] = False
            for s in range(k):
                best = -1
                for j in range(m):
                    if taken[j]:
                        continue
                    # strict > keeps the lower index on ties
                    if best < 0 or x[r, j] > x[r, best]:
                        best = j
                taken[best] = True
                out[r, s] = best
        return out

    @numba.njit(cache=True)
    def nb_ordered_matmul(x, w):
        n, d = x.shape
        m = w.shape[1]
        out = np.empty((n, m))
        for r in range(n):
            for j in range(m):
                acc = x[r, 0] * w[0, j]
                for i in range(1, d):
                    acc += x[r, i] * w[i, j]
                out[r, j] = acc
        return out

    @numba.njit(cache=True)
    def nb_index_add_rows(out, rows, src):
        d = out.shape[1]
        for i in range(rows.shape[0]):
            r = rows[i]
            for c in range(d):
                out[r, c] += src[i, c]

    # tanh via exp: libm tanh is several times slower than exp here
    @numba.njit(cache=True)
    def _nb_tanh(u):
        return 1.0 - 2.0 / (math.exp(2.0 * u) + 1.0)

    @numba.njit(cache=True)
    def _nb_gelu_tanh_flat(x, out):
        for i in range(x.shape[0]):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + _nb_tanh(_SQRT_2_OVER_PI * (v + _GELU_C * v * v * v)))

    @numba.njit(cache=True)
    def _nb_gelu_tanh_grad_flat(x, out):
        for i in range(x.shape[0]):
            v = x[i]
            t = _nb_tanh(_SQRT_2_OVER_PI * (v + _GELU_C * v * v * v))
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * v * v)
            out[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du

    @numba.njit(cache=True)
    def _nb_gelu_erf_flat(x, out):
        for i in range(x.shape[0]):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))

    @numba.njit(cache=True)
    def _nb_gelu_erf_grad_flat(x, out):
        for i in range(x.shape[0]):
            v = x[i]
            out[i] = 0.5 * (1.0 + math.erf(v * _INV_SQRT2)) + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v)

    def _flat_apply(kernel, x):
        xf = np.ascontiguousarray(x).reshape(-1)
        out = np.empty_like(xf)
        kernel(xf, out)
        return out.reshape(x.shape)

    def nb_gelu_tanh(x):
        return _flat_apply(_nb_gelu_tanh_flat, x)

    def nb_gelu_tanh_grad(x):
        return _flat_apply(_nb_gelu_tanh_grad_flat, x)

    def nb_gelu_erf(x):
        return _flat_apply(_nb_gelu_erf_flat, x)

    def nb_gelu_erf_grad(x):
        return _flat_apply(_nb_gelu_erf_grad_flat, x)

    @numba.njit(cache=True)
    def nb_count_selections(idx, m):
        counts = np.zeros(m, dtype=np.int64)
        flat = idx.ravel()
        for i in range(flat.shape[0]):
            counts[flat[i]] += 1
        return counts

    @numba.njit(cache=True)
    def nb_layernorm_fwd(x2, eps):
        n, d = x2.shape
        xhat = np.empty_like(x2)
        rstd = np.empty(n)
        for r in range(n):
            mu = 0.0
            for c in range(d):
                mu += x2[r, c]
            mu /= d
            var = 0.0
            for c in range(d):
                t = x2[r, c] - mu
                var += t * t
            var /= d
            s = 1.0 / math.sqrt(var + eps)
            rstd[r] = s
            for c in range(d):
                xhat[r, c] = (x2[r, c] - mu) * s
        return xhat, rstd

    @numba.njit(cache=True)
    def nb_layernorm_bwd(gxhat, xhat, rstd):
        n, d = gxhat.shape
        gx = np.empty_like(gxhat)
        for r in range(n):
            m1 = 0.0
            m2 = 0.0
            for c in range(d):
                m1 += gxhat[r, c]
                m2 += gxhat[r, c] * xhat[r, c]
            m1 /= d
            m2 /= d
            for c in range(d):
                gx[r, c] = (gxhat[r, c] - m1 - xhat[r, c] * m2) * rstd[r]
        return gx


    @numba.njit(cache=True)
    def _nb_adamw_flat(p, g, m, v, lr, b1, b2, c1, c2, eps, wd):
        for i in range(p.shape[0]):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            if lr != 0.0:
                pi = p[i]
                if wd != 0.0:
                    pi *= 1.0 - lr * wd
                p[i] = pi - lr * (mi / c1) / (math.sqrt(vi / c2) + eps)

    def nb_adamw_update(p, g, m, v, lr, b1, b2, c1, c2, eps, wd):
        if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
            return np_adamw_update(p, g, m, v, lr, b1, b2, c1, c2, eps, wd)
        _nb_adamw_flat(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
                       lr, b1, b2, c1, c2, eps, wd)


def _pick(name: str):
    if USE_NUMBA:
        return globals()["nb_" + name]
    return globals()["np_" + name]


def topk_rows(x: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the ``k`` largest entries, lower index first on ties."""
    return _pick("topk_rows")(np.ascontiguousarray(x, dtype=np.float64), int(k))


def ordered_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` with every entry summed left to right over the shared axis.

    The result for a column depends only on that column, so identical
    columns give identical entries at any matrix width.
    """
    return _pick("ordered_matmul")(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64))


def index_add_rows(out: np.ndarray, rows: np.ndarray, src: np.ndarray) -> None:
    """In-place ``out[rows[i]] += src[i]`` with duplicate rows accumulated."""
    _pick("index_add_rows")(out, np.ascontiguousarray(rows, dtype=np.int64), np.ascontiguousarray(src))


def gelu(x: np.ndarray, approximate: str = "tanh") -> np.ndarray:
    return _pick("gelu_tanh" if approximate == "tanh" else "gelu_erf")(x)


def gelu_grad(x: np.ndarray, approximate: str = "tanh") -> np.ndarray:
    return _pick("gelu_tanh_grad" if approximate == "tanh" else "gelu_erf_grad")(x)


def count_selections(idx: np.ndarray, m: int) -> np.ndarray:
    return _pick("count_selections")(np.ascontiguousarray(idx, dtype=np.int64), int(m))


def layernorm_fwd(x2: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    return _pick("layernorm_fwd")(np.ascontiguousarray(x2), float(eps))


def layernorm_bwd(gxhat: np.ndarray, xhat: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    return _pick("layernorm_bwd")(np.ascontiguousarray(gxhat), xhat, rstd)


def adamw_update(p, g, m, v, lr, b1, b2, c1, c2, eps, wd) -> None:
    """One in-place AdamW update of parameter ``p`` and moments ``m``, ``v``."""
    _pick("adamw_update")(p, g, m, v, float(lr), float(b1), float(b2), float(c1), float(c2), float(eps), float(wd))
