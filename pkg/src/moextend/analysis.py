"""Routing distributions, balance metrics, forgetting tables and their CSV forms."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .extender import EmptyDataError, count_selections, normalize_counts
from .model import Model

SIG_DIGITS = 12


def fmt(x: float) -> str:
    """Twelve significant digits, so a parsed value is within 5e-12 relative of the original."""
    return format(float(x), f".{SIG_DIGITS}g")


@dataclass
class ExpertDistribution:
    proportions: np.ndarray  # m x L, columns sum to 1
    token_count: int
    model_id: str = ""
    dataset_id: str = ""

    def layer(self, j: int) -> np.ndarray:
        return self.proportions[:, j]


def expert_distribution(model: Model, samples: Sequence, model_id: str = "", dataset_id: str = "",
                        threads: int = 1) -> ExpertDistribution:
    if not samples:
        raise EmptyDataError("expert_distribution needs a non-empty dataset")
    counts = count_selections(model, samples, threads=threads)
    return ExpertDistribution(normalize_counts(counts), counts.total_tokens, model_id, dataset_id)


def balance_score(dist: ExpertDistribution | np.ndarray) -> np.ndarray:
    """Per-layer normalized entropy ``H(p) / ln m``; 1 means perfectly balanced."""
    p = dist.proportions if isinstance(dist, ExpertDistribution) else np.asarray(dist, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    m = p.shape[0]
    if m == 1:
        return np.ones(p.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=0) / math.log(m)


@dataclass
class ForgettingSummary:
    tasks: list[str]
    before: dict[str, dict[str, float]]
    after: dict[str, dict[str, float]]
    avg_drop: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float, float, float]]:
        out = []
        for variant in self.before:
            for t in self.tasks:
                b, a = self.before[variant][t], self.after[variant][t]
                out.append((variant, t, b, a, b - a))
        return out


def forgetting_summary(reports: Mapping[str, Mapping[str, Mapping[str, float]]]) -> ForgettingSummary:
    """``reports[variant] = {"before": {task: metric}, "after": {task: metric}}``."""
    if not reports:
        raise ValueError("forgetting_summary needs at least one variant")
    tasks = None
    before, after, drops = {}, {}, {}
    for variant, r in reports.items():
        b, a = dict(r["before"]), dict(r["after"])
        if set(b) != set(a):
            raise ValueError(f"{variant}: before/after task sets differ")
        if tasks is None:
            tasks = sorted(b)
        elif sorted(b) != tasks:
            raise ValueError(f"{variant}: task set {sorted(b)} differs from {tasks}")
        before[variant], after[variant] = b, a
        drops[variant] = float(np.mean([b[t] - a[t] for t in tasks]))
    return ForgettingSummary(tasks, before, after, drops)


# ------------------------------------------------------------------ CSV


def _emit(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def distributions_csv(dist: ExpertDistribution) -> str:
    m, n_layers = dist.proportions.shape
    return _emit(("layer", "expert", "proportion"),
                 ((j, i, float(dist.proportions[i, j])) for j in range(n_layers) for i in range(m)))


def shift_csv(d: Sequence[float], chosen: Sequence[int]) -> str:
    chosen = set(chosen)
    return _emit(("layer", "d", "selected"), ((j, float(x), int(j in chosen)) for j, x in enumerate(d)))


def forgetting_csv(summary: ForgettingSummary) -> str:
    return _emit(("variant", "task", "before", "after", "drop"), summary.rows())


def parse_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def parse_distributions(text: str) -> np.ndarray:
    rows = parse_csv(text)
    if not rows:
        raise EmptyDataError("no rows")
    n_layers = 1 + max(int(r["layer"]) for r in rows)
    m = 1 + max(int(r["expert"]) for r in rows)
    out = np.zeros((m, n_layers))
    for r in rows:
        out[int(r["expert"]), int(r["layer"])] = float(r["proportion"])
    return out
