"""Deterministic synthetic corpora.

Task A is text-only keyed retrieval: ``k1 v1 k2 v2 Q kq -> v(kq)``.
Task B pairs ``prefix_len`` raw modality vectors, drawn around a per-class
prototype, with either a caption (``CAP name(c)``) or an instruction
(``ASK q attr_q(c)``). The class is only visible through the raw vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import DataConfig


@dataclass(frozen=True)
class Vocab:
    n_keys: int
    n_values: int
    num_classes: int
    n_questions: int

    QUERY = 0
    CAP = 1
    ASK = 2

    @property
    def key0(self) -> int:
        return 3

    @property
    def value0(self) -> int:
        return self.key0 + self.n_keys

    @property
    def name0(self) -> int:
        return self.value0 + self.n_values

    @property
    def question0(self) -> int:
        return self.name0 + self.num_classes

    @property
    def answer0(self) -> int:
        return self.question0 + self.n_questions

    @property
    def size(self) -> int:
        return self.answer0 + self.num_classes

    def values(self) -> np.ndarray:
        return np.arange(self.value0, self.value0 + self.n_values)

    def names(self) -> np.ndarray:
        return np.arange(self.name0, self.name0 + self.num_classes)

    def answers(self) -> np.ndarray:
        return np.arange(self.answer0, self.answer0 + self.num_classes)

    @classmethod
    def from_config(cls, cfg: DataConfig) -> "Vocab":
        return cls(cfg.n_keys, cfg.n_values, cfg.num_classes, cfg.n_questions)


@dataclass
class TaskASample:
    tokens: list[int]
    targets: list[int]  # positions in ``tokens`` predicted from the previous position

    @property
    def answer(self) -> int:
        return self.tokens[self.targets[-1]]


@dataclass
class TaskBSample:
    raw: np.ndarray  # prefix_len x f_raw
    tokens: list[int]
    targets: list[int]
    label: int
    kind: str
    question: int = -1

    @property
    def answer(self) -> int:
        return self.tokens[self.targets[-1]]


@dataclass
class World:
    """Fixed facts shared by every corpus: prototypes and attribute tables."""

    vocab: Vocab
    prototypes: np.ndarray  # classes x prefix_len x f_raw
    attributes: np.ndarray  # questions x classes -> attribute index
    noise: float

    @classmethod
    def build(cls, cfg: DataConfig, prefix_len: int, f_raw: int) -> "World":
        rng = np.random.default_rng(cfg.world_seed)
        protos = rng.normal(0.0, 1.0, (cfg.num_classes, prefix_len, f_raw))
        attrs = np.stack([rng.permutation(cfg.num_classes) for _ in range(cfg.n_questions)])
        return cls(Vocab.from_config(cfg), protos, attrs, cfg.noise)

    def classify(self, raw: np.ndarray) -> int:
        """Nearest-prototype class of a raw prefix."""
        d = ((self.prototypes - raw[None]) ** 2).sum(axis=(1, 2))
        return int(np.argmin(d))


def gen_task_a(seed: int, count: int, cfg: DataConfig) -> list[TaskASample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    vocab = Vocab.from_config(cfg)
    rng = np.random.default_rng([seed, 0xA])
    out = []
    for i in range(count):
        keys = rng.choice(cfg.n_keys, size=cfg.n_pairs, replace=False)
        vals = rng.integers(0, cfg.n_values, size=cfg.n_pairs)
        q = int(rng.integers(cfg.n_pairs))
        vals[q] = i % cfg.n_values  # balanced answers
        toks: list[int] = []
        for k, val in zip(keys, vals):
            toks += [vocab.key0 + int(k), vocab.value0 + int(val)]
        toks += [Vocab.QUERY, vocab.key0 + int(keys[q]), vocab.value0 + int(vals[q])]
        out.append(TaskASample(toks, [len(toks) - 1]))
    order = rng.permutation(count)
    return [out[j] for j in order]


def gen_task_b(seed: int, count: int, kind: str, world: World) -> list[TaskBSample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    if kind not in ("caption", "instruction"):
        raise ValueError(f"unknown task-B kind {kind!r}")
    vocab = world.vocab
    n_cls, n_q = vocab.num_classes, vocab.n_questions
    rng = np.random.default_rng([seed, 0xB, 0 if kind == "caption" else 1])
    out = []
    for i in range(count):
        c = i % n_cls
        raw = world.prototypes[c] + rng.normal(0.0, world.noise, world.prototypes.shape[1:])
        if kind == "caption":
            out.append(TaskBSample(raw, [Vocab.CAP, vocab.name0 + c], [1], c, kind))
        else:
            q = (i // n_cls) % n_q
            ans = vocab.answer0 + int(world.attributes[q, c])
            out.append(TaskBSample(raw, [Vocab.ASK, vocab.question0 + q, ans], [2], c, kind, q))
    order = rng.permutation(count)
    return [out[j] for j in order]


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    n_e: int


def split(dataset: Sequence, spec: SplitSpec) -> tuple[list, list]:
    """Random held-out subset of size ``n_e`` and the remaining training set."""
    if not 0 <= spec.n_e < len(dataset):
        raise ValueError(f"n_e={spec.n_e} must be below the dataset size {len(dataset)}")
    perm = np.random.default_rng([spec.seed, 0x5]).permutation(len(dataset))
    held = set(perm[: spec.n_e].tolist())
    s_t = [s for i, s in enumerate(dataset) if i not in held]
    s_e = [dataset[i] for i in sorted(held)]
    return s_t, s_e


def _record(sample) -> dict:
    rec = {"tokens": list(map(int, sample.tokens)), "targets": list(map(int, sample.targets))}
    if isinstance(sample, TaskBSample):
        rec.update(kind=sample.kind, label=sample.label, question=sample.question,
                   raw=np.asarray(sample.raw).tolist())
    return rec


def export_jsonl(samples: Iterable, path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(_record(s)) + "\n")


def load_jsonl(path: str | Path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "kind" in rec:
                out.append(TaskBSample(np.asarray(rec["raw"]), rec["tokens"], rec["targets"],
                                       rec["label"], rec["kind"], rec["question"]))
            else:
                out.append(TaskASample(rec["tokens"], rec["targets"]))
    return out


@dataclass
class Batch:
    tokens: np.ndarray  # B x N
    raw: np.ndarray | None  # B x P x f_raw
    target_pos: np.ndarray  # (b, n) index pairs into tokens
    target_tok: np.ndarray


def collate(samples: Sequence) -> Batch:
    lengths = {len(s.tokens) for s in samples}
    if len(lengths) != 1:
        raise ValueError("a batch must hold sequences of one length")
    toks = np.array([s.tokens for s in samples], dtype=np.int64)
    raw = None
    if isinstance(samples[0], TaskBSample):
        raw = np.stack([s.raw for s in samples])
    pos = np.array([(b, t) for b, s in enumerate(samples) for t in s.targets], dtype=np.int64)
    return Batch(toks, raw, pos, toks[pos[:, 0], pos[:, 1]])


def task_a_oracle(tokens: Sequence[int], vocab: Vocab) -> int:
    """Replay the retrieval grammar to find the expected value token."""
    q = list(tokens).index(Vocab.QUERY)
    want = tokens[q + 1]
    for i in range(0, q, 2):
        if tokens[i] == want:
            return int(tokens[i + 1])
    raise ValueError("query key missing from context")
