"""Stage runners: base pretraining, alignment, router tuning, extension fine-tuning."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import Batch, TaskASample, TaskBSample, Vocab, collate
from .model import Model, forward_hidden
from .moe import Routing
from .optim import AdamW, clip_grad_norm, lr_at

STAGES = ("pretrain", "align", "extender", "finetune", "full")
# stage -> stages that must already appear in the model history
PREREQUISITES = {
    "pretrain": (),
    "align": ("pretrain",),
    "extender": ("align",),
    "finetune": ("surgery",),
    "full": ("align",),
}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, stage: str, step: int, what: str):
        super().__init__(f"{stage}: non-finite {what} at step {step}")
        self.stage, self.step, self.what = stage, step, what


class StageOrderError(RuntimeError):
    pass


class TargetNotReached(RuntimeError):
    def __init__(self, accuracy: float, target: float):
        super().__init__(f"pretraining reached accuracy {accuracy:.4f} below target {target:.4f}")
        self.accuracy = accuracy


@dataclass
class StageReport:
    stage: str
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    aux: list[float] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    trainable_params: int = 0
    total_params: int = 0
    wall_time: float = 0.0

    def final_loss(self, window: int = 20) -> float:
        tail = self.losses[-window:]
        return float(np.mean(tail)) if tail else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "aux_loss"])
        for row in zip(self.steps, self.losses, self.lrs, self.aux):
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()


# ------------------------------------------------------------------ losses


def aux_loss(routes: Sequence[Routing]) -> Tensor:
    """Top-1 dispatch load-balancing loss ``m * sum_i f_i P_i``, averaged over layers.

    ``f_i`` is the fraction of tokens whose first choice is expert ``i`` and
    ``P_i`` the mean router probability of ``i``. Equals 1 under perfect balance.
    """
    if not routes:
        raise ValueError("aux_loss needs routing statistics from at least one layer")
    terms = []
    for r in routes:
        n, m = r.probs.shape
        if n == 0:
            raise ValueError("aux_loss needs at least one routed token")
        frac = _kernels.count_selections(r.topk[:, 0], m) / n
        terms.append(ad.tsum(ad.mean(r.probs, axis=0) * frac) * float(m))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def prefix_for(model: Model, batch: Batch, use_prefix: bool = True) -> Tensor | None:
    if batch.raw is None or not use_prefix or model.frontend is None:
        return None
    return model.frontend(batch.raw)


def batch_loss(model: Model, batch: Batch, aux_coefficient: float) -> tuple[Tensor, float, float]:
    prefix = prefix_for(model, batch)
    p = 0 if prefix is None else prefix.shape[1]
    h, routes = forward_hidden(model, batch.tokens, prefix, collect=True)
    b, s, d = h.shape
    rows = batch.target_pos[:, 0] * s + p + batch.target_pos[:, 1] - 1
    logits = ad.take_rows(ad.reshape(h, (b * s, d)), rows) @ model.head
    ce = ad.cross_entropy(logits, batch.target_tok)
    aux = aux_loss(routes)
    loss = ce + aux * aux_coefficient if aux_coefficient else ce
    return loss, float(ce.data), float(aux.data)


# ------------------------------------------------------------------ evaluation


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("MOEXTEND_THREADS", "1")))
    except ValueError:
        return 1


def _predict(model: Model, samples: Sequence, candidates: np.ndarray, use_prefix: bool) -> np.ndarray:
    batch = collate(samples)
    with ad.no_grad():
        prefix = prefix_for(model, batch, use_prefix)
        p = 0 if prefix is None else prefix.shape[1]
        h, _ = forward_hidden(model, batch.tokens, prefix)
        rows = h.data[batch.target_pos[:, 0], p + batch.target_pos[:, 1] - 1]
        scores = rows @ model.head.data[:, candidates]
    # first maximum wins, matching the lower-index tie rule
    return (candidates[np.argmax(scores, axis=1)] == batch.target_tok).astype(np.int64)


def accuracy(model: Model, samples: Sequence, candidates, batch_size: int = 256,
             use_prefix: bool = True, threads: int | None = None) -> float:
    """Fraction of targets whose highest-scoring candidate token is correct."""
    if not samples:
        raise ValueError("accuracy needs at least one sample")
    candidates = np.asarray(candidates, dtype=np.int64)
    chunks = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]
    threads = threads or eval_threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda c: _predict(model, c, candidates, use_prefix), chunks))
    else:
        parts = [_predict(model, c, candidates, use_prefix) for c in chunks]
    hits = np.concatenate(parts)
    return float(hits.sum() / hits.size)


def task_a_accuracy(model: Model, samples: Sequence[TaskASample], vocab: Vocab) -> float:
    return accuracy(model, samples, vocab.values())


def task_b_accuracy(model: Model, samples: Sequence[TaskBSample], vocab: Vocab, use_prefix: bool = True) -> float:
    cands = vocab.names() if samples[0].kind == "caption" else vocab.answers()
    return accuracy(model, samples, cands, use_prefix=use_prefix)


# ------------------------------------------------------------------ training loop


def _batches(samples: Sequence, batch_size: int, rng: np.random.Generator):
    n = len(samples)
    bs = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - bs + 1, bs):
            yield collate([samples[j] for j in order[i:i + bs]])


def train_loop(model: Model, samples: Sequence, cfg: TrainConfig, stage: str,
               params: Sequence[Tensor] | None = None, log_every: int = 0) -> StageReport:
    """Optimize the parameters that currently require grad; everything else is untouched."""
    cfg.validate()
    params = list(params) if params is not None else [p for p in model.parameters() if p.requires_grad]
    report = StageReport(stage, trainable_params=sum(p.size for p in params),
                         total_params=model.num_parameters())
    if cfg.steps == 0:
        return report
    if not params:
        raise StageOrderError(f"{stage}: no trainable parameters")
    opt = AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, STAGES.index(stage) if stage in STAGES else 99])
    stream = _batches(samples, cfg.batch_size, rng)
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup_ratio, cfg.schedule)
        opt.lr = lr
        opt.zero_grad()
        loss, ce, aux = batch_loss(model, next(stream), cfg.aux_coefficient)
        if not math.isfinite(float(loss.data)):
            raise DivergenceError(stage, step, "loss")
        loss.backward()
        norm = clip_grad_norm(params, cfg.grad_clip)
        if not math.isfinite(norm):
            raise DivergenceError(stage, step, "gradient")
        opt.step()
        report.steps.append(step)
        report.losses.append(float(loss.data))
        report.lrs.append(lr)
        report.aux.append(aux)
        if log_every and step % log_every == 0:
            print(f"[{stage}] step {step} loss {float(loss.data):.4f} ce {ce:.4f} lr {lr:.2e}", flush=True)
    report.wall_time = time.perf_counter() - t0
    return report
