"""Pre-norm decoder-only transformer whose feed-forward blocks are MoE layers."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ModelConfig
from .moe import MoeLayer, Routing
from .nn import Module, param

_MASK_FILL = -1e30


class Attention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, out_scale: float = 1.0):
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
        s = d_model**-0.5
        self.wq = param(rng.normal(0.0, s, (d_model, d_model)))
        self.wk = param(rng.normal(0.0, s, (d_model, d_model)))
        self.wv = param(rng.normal(0.0, s, (d_model, d_model)))
        self.wo = param(rng.normal(0.0, s * out_scale, (d_model, d_model)))
        self.n_heads = n_heads

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        b, s, d = x.shape
        h = self.n_heads
        dh = d // h

        def heads(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (b, s, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(x @ self.wq), heads(x @ self.wk), heads(x @ self.wv)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (dh**-0.5) + mask
        att = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, s, d))
        return ctx @ self.wo


class TransformerBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.ln1_g = param(np.ones(d))
        self.ln1_b = param(np.zeros(d))
        self.attn = Attention(d, cfg.n_heads, rng, out_scale=(2 * cfg.n_layers) ** -0.5)
        self.ln2_g = param(np.ones(d))
        self.ln2_b = param(np.zeros(d))
        self.moe = MoeLayer(
            d, cfg.hidden, cfg.n_experts, cfg.top_k, rng,
            gelu=cfg.gelu, renormalize_topk=cfg.renormalize_topk, router_std=cfg.router_std,
        )
        for e in self.moe.experts:
            e.w_out.data *= (2 * cfg.n_layers) ** -0.5

    def __call__(self, x: Tensor, mask: np.ndarray, routes: list | None = None) -> Tensor:
        b, s, d = x.shape
        x = self.attn(ad.layernorm(x, self.ln1_g, self.ln1_b), mask) + x
        flat = ad.reshape(ad.layernorm(x, self.ln2_g, self.ln2_b), (b * s, d))
        y, routing = self.moe(flat)
        if routes is not None:
            routes.append(routing)
        return ad.reshape(y, (b, s, d)) + x


def causal_mask(s: int) -> np.ndarray:
    m = np.zeros((s, s))
    m[np.triu_indices(s, 1)] = _MASK_FILL
    return m


def block_forward(block: TransformerBlock, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """One residual attention + MoE block on ``S x D`` or ``B x S x D`` input."""
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if mask is None:
        mask = causal_mask(x.shape[1])
    out = block(x, mask)
    return ad.reshape(out, out.shape[1:]) if single else out


@dataclass
class ForwardResult:
    logits: Tensor
    routes: list[Routing] = field(default_factory=list)


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        if cfg.vocab_size is None:
            raise ValueError("vocab_size must be set before building a model")
        rng = np.random.default_rng(seed)
        d, v = cfg.d_model, cfg.vocab_size
        self.cfg = cfg
        self.tok_emb = param(rng.normal(0.0, 1.0, (v, d)))
        self.pos_emb = param(rng.normal(0.0, 0.1, (cfg.max_len, d)))
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.lnf_g = param(np.ones(d))
        self.lnf_b = param(np.zeros(d))
        self.head = param(rng.normal(0.0, d**-0.5, (d, v)))
        self.frontend = None  # attached by the alignment stage
        self.history: list[str] = []

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def moe_layers(self) -> list[MoeLayer]:
        return [b.moe for b in self.blocks]

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def architecture(self) -> dict:
        """Structural description sufficient to rebuild an empty twin."""
        layers = []
        for layer in self.moe_layers():
            cal = layer.calibration
            layers.append({
                "n_experts": layer.n_experts,
                "n_base": layer.n_base,
                "router_extra": 0 if layer.router.extra is None else layer.router.extra.shape[1],
                "calibration": None if cal is None else {
                    "kind": cal.kind, "mode": cal.mode, "init": cal.init, "hidden": cal.hidden,
                },
            })
        return {"layers": layers}


def model_forward(model: Model, tokens, prefix_vectors: Tensor | None = None, collect: bool = False) -> ForwardResult:
    """Logits for ``[prefix_vectors ; embed(tokens)]`` under a causal mask.

    ``tokens`` is ``N`` or ``B x N`` integer ids; ``prefix_vectors`` is
    ``P x D`` or ``B x P x D``. Logits cover every position, prefix included.
    """
    single = np.asarray(tokens).ndim == 1
    h, routes = forward_hidden(model, tokens, prefix_vectors, collect)
    logits = h @ model.head
    if single:
        logits = ad.reshape(logits, logits.shape[1:])
    return ForwardResult(logits, routes)


def forward_hidden(model: Model, tokens, prefix_vectors: Tensor | None = None,
                   collect: bool = False) -> tuple[Tensor, list[Routing]]:
    """Final normalized hidden states ``B x S x D`` and per-layer routing."""
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.size == 0:
        raise ValueError("tokens must be non-empty")
    v = model.cfg.vocab_size
    if np.any(tok < 0) or np.any(tok >= v):
        raise IndexError(f"token id outside vocabulary [0, {v})")
    b, n = tok.shape
    d = model.cfg.d_model
    x = ad.reshape(ad.take_rows(model.tok_emb, tok.ravel()), (b, n, d))
    if prefix_vectors is not None:
        pre = prefix_vectors
        if pre.ndim == 2:
            pre = ad.reshape(pre, (1,) + pre.shape)
        if pre.shape[0] != b or pre.shape[2] != d:
            raise ShapeError(f"prefix {prefix_vectors.shape} incompatible with tokens {tok.shape} at width {d}")
        x = ad.concat([pre, x], axis=1)
    s = x.shape[1]
    if s > model.cfg.max_len:
        raise ShapeError(f"sequence length {s} exceeds max_len {model.cfg.max_len}")
    x = x + _rows(model.pos_emb, s)
    mask = causal_mask(s)
    routes: list[Routing] | None = [] if collect else None
    for block in model.blocks:
        x = block(x, mask, routes)
    return ad.layernorm(x, model.lnf_g, model.lnf_b), routes or []


def _rows(t: Tensor, s: int) -> Tensor:
    return ad.take_rows(t, np.arange(s)) if s != t.shape[0] else t


def collect_routing(model: Model, batches) -> np.ndarray:
    """``m x L`` counts of (token, layer) events where expert ``i`` was in the top-k.

    ``batches`` yields ``(tokens, prefix_vectors_or_None)`` pairs.
    """
    ms = {layer.n_experts for layer in model.moe_layers()}
    if len(ms) != 1:
        raise ValueError("collect_routing needs a uniform expert count across layers")
    m = ms.pop()
    counts = np.zeros((m, model.n_layers), dtype=np.int64)
    with ad.no_grad():
        for tokens, prefix in batches:
            res = model_forward(model, tokens, prefix, collect=True)
            for j, r in enumerate(res.routes):
                counts[:, j] += _kernels.count_selections(r.topk, m)
    return counts
