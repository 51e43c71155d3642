"""Router-shift analysis that decides which MoE layers get a new expert."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import ShapeError
from .config import TrainConfig
from .data import collate
from .model import Model, forward_hidden
from .surgery import apply_manifest, build_manifest, pick_source
from .training import StageReport, prefix_for, train_loop


class EmptyDataError(ValueError):
    pass


@dataclass
class SelectionCounts:
    matrix: np.ndarray  # m x L integer counts
    total_tokens: int
    k: int

    def check(self) -> None:
        want = self.k * self.total_tokens
        sums = self.matrix.sum(axis=0)
        if np.any(sums != want):
            raise ValueError(f"column sums {sums.tolist()} differ from k * tokens = {want}")

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "total_tokens": self.total_tokens, "k": self.k}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionCounts":
        return cls(np.asarray(d["matrix"], dtype=np.int64), int(d["total_tokens"]), int(d["k"]))


def count_selections(model: Model, samples: Sequence, batch_size: int = 128, threads: int = 1) -> SelectionCounts:
    """Selection counts over every position (prefix included) of every sample.

    Extended layers have one more expert than the rest; rows run to the
    widest layer and narrower layers simply count zero there.
    """
    layers = model.moe_layers()
    m = max(layer.n_experts for layer in layers)
    chunks = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]

    def one(chunk) -> tuple[np.ndarray, int]:
        counts = np.zeros((m, len(layers)), dtype=np.int64)
        batch = collate(chunk)
        with ad.no_grad():
            _, routes = forward_hidden(model, batch.tokens, prefix_for(model, batch), collect=True)
        for j, r in enumerate(routes):
            counts[:, j] += _kernels.count_selections(r.topk, m)
        return counts, routes[0].topk.shape[0]

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, chunks))
    else:
        parts = [one(c) for c in chunks]
    matrix = np.zeros((m, len(layers)), dtype=np.int64)
    tokens = 0
    for c, n in parts:
        matrix += c
        tokens += n
    out = SelectionCounts(matrix, tokens, layers[0].k)
    out.check()
    return out


def normalize_counts(counts: SelectionCounts) -> np.ndarray:
    """Per-layer selection distribution: counts over the (shared) column total."""
    if counts.total_tokens <= 0:
        raise EmptyDataError("no tokens were counted")
    return counts.matrix / float(counts.matrix[:, 0].sum())


def shift_statistic(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """Population standard deviation over experts of the per-layer distribution change."""
    before, after = np.asarray(before, dtype=np.float64), np.asarray(after, dtype=np.float64)
    if before.shape != after.shape:
        raise ShapeError(f"distribution shapes differ: {before.shape} vs {after.shape}")
    return np.std(before - after, axis=0)


def select_layers(d: Sequence[float], p: float) -> list[int]:
    """Indices of the ``floor(p * L)`` largest shifts, lower index first on ties."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    d = np.asarray(d, dtype=np.float64)
    n = math.floor(p * len(d) + 1e-12)
    if n == 0:
        raise ValueError(f"floor({p} * {len(d)}) = 0 layers selected")
    order = np.argsort(-d, kind="stable")
    return sorted(int(j) for j in order[:n])


def pick_source_expert(counts: SelectionCounts, layer: int) -> int:
    col = counts.matrix[:, layer]
    if not np.any(col):
        raise EmptyDataError(f"layer {layer} has no recorded selections")
    return pick_source(col)


@dataclass
class ExtensionPlan:
    p: float
    d: list[float]
    chosen_layers: list[int]
    source_expert: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> str:
        body = {
            "p": self.p,
            "d": [float(x) for x in self.d],
            "chosen_layers": list(map(int, self.chosen_layers)),
            "source_expert": {str(k): int(v) for k, v in sorted(self.source_expert.items())},
        }
        return json.dumps(body, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExtensionPlan":
        body = json.loads(text)
        missing = {"p", "d", "chosen_layers", "source_expert"} - set(body)
        if missing:
            raise ValueError(f"plan is missing fields {sorted(missing)}")
        return cls(float(body["p"]), [float(x) for x in body["d"]], [int(x) for x in body["chosen_layers"]],
                   {int(k): int(v) for k, v in body["source_expert"].items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExtensionPlan":
        return cls.from_json(Path(path).read_text())


def tune_routers(model: Model, samples: Sequence, cfg: TrainConfig) -> tuple[Model, StageReport]:
    """Copy of ``model`` in which only the router matrices have been trained."""
    tuned = model.clone()
    params = apply_manifest(tuned, build_manifest(tuned, "extender"))
    report = train_loop(tuned, samples, cfg, "extender", params)
    for p in tuned.parameters():
        p.set_requires_grad(False)
    return tuned, report


@dataclass
class ExtenderResult:
    plan: ExtensionPlan
    before: SelectionCounts
    after: SelectionCounts
    report: StageReport


def run_extender(model: Model, s_t: Sequence, s_e: Sequence, cfg: TrainConfig, p: float = 0.5,
                 source_counts: str = "pre", threads: int = 1) -> ExtenderResult:
    before = count_selections(model, s_e, threads=threads)
    tuned, report = tune_routers(model, s_t, cfg)
    after = count_selections(tuned, s_e, threads=threads)
    d = shift_statistic(normalize_counts(before), normalize_counts(after))
    chosen = select_layers(d, p)
    src = before if source_counts == "pre" else after
    plan = ExtensionPlan(p, d.tolist(), chosen, {j: pick_source_expert(src, j) for j in chosen})
    return ExtenderResult(plan, before, after, report)
