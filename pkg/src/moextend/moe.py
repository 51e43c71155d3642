"""Sparse mixture-of-experts feed-forward layer with optional gate calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Module, param

CALIBRATION_KINDS = ("type1", "type2")
# additive: s + c ; multiplicative: s * c ; residual: s * (1 + c)
CALIBRATION_MODES = ("additive", "multiplicative", "residual")
CALIBRATION_INITS = {
    "type1": ("zero", "one", "normal"),
    "type2": ("zero+normal", "normal+normal"),
}


def default_calibration_init(kind: str, mode: str) -> str:
    if kind == "type1":
        return "one" if mode == "multiplicative" else "zero"
    return "normal+normal" if mode == "multiplicative" else "zero+normal"


def calibration_width(d_model: int) -> int:
    return max(1, d_model // 4)


class ExpertFfn(Module):
    def __init__(self, d_model: int, d_hidden: int, rng: np.random.Generator, gelu: str = "tanh"):
        self.w_in = param(rng.normal(0.0, d_model**-0.5, (d_model, d_hidden)))
        self.b_in = param(np.zeros(d_hidden))
        self.w_out = param(rng.normal(0.0, d_hidden**-0.5, (d_hidden, d_model)))
        self.b_out = param(np.zeros(d_model))
        self.gelu = gelu

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.gelu(x @ self.w_in + self.b_in, self.gelu)
        return h @ self.w_out + self.b_out

    def copy(self) -> "ExpertFfn":
        out = ExpertFfn.__new__(ExpertFfn)
        out.w_in = param(self.w_in.data)
        out.b_in = param(self.b_in.data)
        out.w_out = param(self.w_out.data)
        out.b_out = param(self.b_out.data)
        out.gelu = self.gelu
        return out


class Router(Module):
    """Per-expert logits ``x @ [weight | extra]``.

    ``extra`` holds router columns appended by extension surgery, kept as a
    separate parameter so the original columns can stay frozen.
    """

    def __init__(self, weight: np.ndarray):
        self.weight = param(weight)
        self.extra: Tensor | None = None

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1] + (0 if self.extra is None else self.extra.shape[1])

    def matrix(self) -> np.ndarray:
        if self.extra is None:
            return self.weight.data
        return np.concatenate([self.weight.data, self.extra.data], axis=1)

    def logits(self, x: Tensor) -> Tensor:
        # column-local sums: a copied column ties its source exactly, and
        # appending columns leaves the original logits bit-identical
        if self.extra is None:
            return ad.ordered_matmul(x, self.weight)
        return ad.ordered_matmul(x, ad.concat([self.weight, self.extra], axis=1))


class CalibrationModule(Module):
    """Learned per-expert correction applied to the router's gate weights."""

    def __init__(
        self,
        kind: str,
        mode: str,
        d_model: int,
        n_experts: int,
        rng: np.random.Generator,
        init: str | None = None,
        hidden: int | None = None,
        init_std: float = 0.02,
        gelu: str = "tanh",
    ):
        if kind not in CALIBRATION_KINDS:
            raise ValueError(f"unknown calibration kind {kind!r}")
        if mode not in CALIBRATION_MODES:
            raise ValueError(f"unknown calibration mode {mode!r}")
        init = init or default_calibration_init(kind, mode)
        if init not in CALIBRATION_INITS[kind]:
            raise ValueError(f"init {init!r} not valid for {kind}")
        self.kind, self.mode, self.init = kind, mode, init
        self.n_experts = n_experts
        self.gelu = gelu
        if kind == "type1":
            fill = {"zero": np.zeros(n_experts), "one": np.ones(n_experts)}.get(init)
            if fill is None:
                fill = rng.normal(0.0, init_std, n_experts)
            self.scale = param(fill)
            self.hidden = 0
        else:
            c = hidden or calibration_width(d_model)
            self.hidden = c
            # normal+normal follows the standard-normal reading for the diverging variant
            std2 = init_std if init == "zero+normal" else 1.0
            self.w2 = param(rng.normal(0.0, std2, (d_model, c)))
            if init == "zero+normal":
                self.w1 = param(np.zeros((c, n_experts)))
            else:
                self.w1 = param(rng.normal(0.0, 1.0, (c, n_experts)))

    @property
    def hazardous(self) -> bool:
        """True for the configuration known to blow up gradients."""
        return self.kind == "type2" and self.mode == "multiplicative" and self.init == "normal+normal"

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "type1":
            return ad.reshape(self.scale, (1, self.n_experts))
        return ad.gelu(x @ self.w2, self.gelu) @ self.w1

    def combine(self, gates: Tensor, calib: Tensor) -> Tensor:
        if self.mode == "additive":
            return gates + calib
        if self.mode == "multiplicative":
            return gates * calib
        return gates * (calib + 1.0)


@dataclass
class Routing:
    """What the router did for one batch of tokens in one layer."""

    probs: Tensor  # N x m, full softmax over all experts
    topk: np.ndarray  # N x k selected expert ids, best first


class MoeLayer(Module):
    def __init__(
        self,
        d_model: int,
        d_hidden: int,
        n_experts: int,
        k: int,
        rng: np.random.Generator,
        gelu: str = "tanh",
        renormalize_topk: bool = False,
        router_std: float = 0.02,
    ):
        if not 1 <= k <= n_experts:
            raise ValueError(f"top-k {k} invalid for {n_experts} experts")
        self.experts = [ExpertFfn(d_model, d_hidden, rng, gelu) for _ in range(n_experts)]
        self.router = Router(rng.normal(0.0, router_std, (d_model, n_experts)))
        self.calibration: CalibrationModule | None = None
        self.k = k
        self.d_model = d_model
        self.d_hidden = d_hidden
        self.n_base = n_experts
        self.gelu = gelu
        self.renormalize_topk = renormalize_topk

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def check(self) -> None:
        m = self.n_experts
        if self.router.n_experts != m:
            raise ShapeError(f"router has {self.router.n_experts} columns for {m} experts")
        if self.calibration is not None and self.calibration.n_experts != m:
            raise ShapeError(f"calibration emits {self.calibration.n_experts} values for {m} experts")
        if not 1 <= self.k <= m:
            raise ValueError(f"top-k {self.k} invalid for {m} experts")

    def __call__(self, x: Tensor) -> tuple[Tensor, Routing]:
        if x.ndim != 2 or x.shape[1] != self.d_model:
            raise ShapeError(f"moe input {x.shape} does not match width {self.d_model}")
        n = x.shape[0]
        probs = ad.softmax(self.router.logits(x), axis=-1, ordered=True)
        # selection always uses the raw router distribution
        top = _kernels.topk_rows(probs.data, self.k)
        gates = ad.gather_cols(probs, top)
        if self.renormalize_topk:
            gates = gates / ad.tsum(gates, axis=1, keepdims=True)
        if self.calibration is not None:
            calib = self.calibration(x)
            if calib.shape[0] == 1:
                picked = ad.reshape(ad.take_rows(ad.reshape(calib, (-1, 1)), top.ravel()), top.shape)
            else:
                picked = ad.gather_cols(calib, top)
            gates = self.calibration.combine(gates, picked)

        flat_gates = ad.reshape(gates, (n * self.k, 1))
        parts, rows_all = [], []
        for e, expert in enumerate(self.experts):
            rows, slots = np.nonzero(top == e)
            if rows.size == 0:
                continue
            y = expert(ad.take_rows(x, rows))
            w = ad.take_rows(flat_gates, rows * self.k + slots)
            parts.append(y * w)
            rows_all.append(rows)
        out = ad.scatter_rows(ad.concat(parts, axis=0), np.concatenate(rows_all), n)
        return out, Routing(probs, top)


def _as_batch(layer: MoeLayer, x) -> tuple[Tensor, bool]:
    t = ad.as_tensor(x)
    single = t.ndim == 1
    if single:
        t = ad.reshape(t, (1, -1))
    if t.shape[-1] != layer.d_model:
        raise ShapeError(f"input width {t.shape[-1]} does not match layer width {layer.d_model}")
    return t, single


def router_probs(layer: MoeLayer, x) -> Tensor:
    """Softmax over per-expert router logits for one token or a batch of tokens."""
    t, single = _as_batch(layer, x)
    probs = ad.softmax(layer.router.logits(t), axis=-1, ordered=True)
    return ad.reshape(probs, (-1,)) if single else probs


def moe_forward(layer: MoeLayer, x) -> Tensor:
    t, single = _as_batch(layer, x)
    out, _ = layer(t)
    return ad.reshape(out, (-1,)) if single else out


def record_selection(layer: MoeLayer, x, counts: np.ndarray) -> None:
    """Add one to ``counts[i]`` for every token that routes to expert ``i``."""
    if counts.shape != (layer.n_experts,):
        raise ShapeError(f"counts shape {counts.shape} != ({layer.n_experts},)")
    t, _ = _as_batch(layer, x)
    with ad.no_grad():
        probs = ad.softmax(layer.router.logits(t), axis=-1, ordered=True)
    counts += _kernels.count_selections(_kernels.topk_rows(probs.data, layer.k), layer.n_experts)
