"""Frozen modality encoder plus the trainable projection into model width."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import FrontendConfig
from .nn import Module, param


class ModalityEncoder(Module):
    """Fixed random linear map without bias; never trained."""

    def __init__(self, f_raw: int, f_enc: int, seed: int):
        rng = np.random.default_rng([seed, 0xE])
        self.weight = param(rng.normal(0.0, f_raw**-0.5, (f_raw, f_enc)))

    def set_trainable(self, flag: bool) -> None:
        if flag:
            raise RuntimeError("the modality encoder is frozen")


def encode(encoder: ModalityEncoder, raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != encoder.weight.shape[0]:
        raise ShapeError(f"raw width {raw.shape[-1]} != encoder input {encoder.weight.shape[0]}")
    return raw @ encoder.weight.data


class Projection(Module):
    def __init__(self, f_enc: int, d_proj: int, d_model: int, rng: np.random.Generator, gelu: str = "tanh"):
        self.w1 = param(rng.normal(0.0, f_enc**-0.5, (f_enc, d_proj)))
        self.b1 = param(np.zeros(d_proj))
        self.w2 = param(rng.normal(0.0, d_proj**-0.5, (d_proj, d_model)))
        self.b2 = param(np.zeros(d_model))
        self.gelu = gelu


def project(projection: Projection, encoded) -> Tensor:
    x = ad.as_tensor(encoded)
    if x.shape[-1] != projection.w1.shape[0]:
        raise ShapeError(f"encoded width {x.shape[-1]} != projection input {projection.w1.shape[0]}")
    h = ad.gelu(x @ projection.w1 + projection.b1, projection.gelu)
    return h @ projection.w2 + projection.b2


class Frontend(Module):
    def __init__(self, cfg: FrontendConfig, d_model: int, seed: int = 0, gelu: str = "tanh"):
        self.cfg = cfg
        self.encoder = ModalityEncoder(cfg.f_raw, cfg.f_enc, cfg.encoder_seed)
        rng = np.random.default_rng([seed, 0xF])
        self.projection = Projection(cfg.f_enc, cfg.d_proj or 2 * d_model, d_model, rng, gelu)

    def __call__(self, raw: np.ndarray) -> Tensor:
        """``B x P x f_raw`` raw inputs to ``B x P x D`` prefix vectors."""
        return project(self.projection, encode(self.encoder, raw))
