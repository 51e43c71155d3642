"""Run configuration: nested dataclasses loaded from and dumped to JSON.

Unknown keys are rejected at every level so a typo never silently falls
back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 8
    n_experts: int = 4
    top_k: int = 2
    n_heads: int = 4
    d_hidden: int | None = None  # defaults to 4 * d_model
    vocab_size: int | None = None  # defaults to the synthetic vocabulary size
    max_len: int = 16
    gelu: str = "tanh"
    renormalize_topk: bool = False
    router_std: float = 0.02

    @property
    def hidden(self) -> int:
        return self.d_hidden or 4 * self.d_model

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k {self.top_k} invalid for {self.n_experts} experts")
        if self.gelu not in ("tanh", "erf"):
            raise ConfigError(f"gelu must be 'tanh' or 'erf', got {self.gelu!r}")


@dataclass
class FrontendConfig:
    f_raw: int = 16
    f_enc: int = 32
    d_proj: int | None = None  # defaults to 2 * d_model
    prefix_len: int = 4
    encoder_seed: int = 7


@dataclass
class DataConfig:
    world_seed: int = 1234
    n_keys: int = 16
    n_values: int = 16
    n_pairs: int = 2
    num_classes: int = 16
    n_questions: int = 4
    noise: float = 0.05
    task_a_train: int = 20000
    task_a_eval: int = 1024
    captions: int = 4000
    instructions: int = 8000
    task_b_eval: int = 1024
    n_e: int = 500


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 200
    batch_size: int = 32
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    weight_decay: float = 0.0
    aux_coefficient: float = 0.001
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.aux_coefficient < 0:
            raise ConfigError("aux_coefficient must be >= 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")


@dataclass
class ExtenderConfig:
    p: float = 0.5
    source_counts: str = "pre"  # "pre" (router counts before tuning) or "post"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, steps=200, batch_size=16))


@dataclass
class SurgeryConfig:
    placement: str = "extender"
    init_scheme: str = "copy_argmax"
    copy_index: int = 0
    calibration_kind: str = "type2"
    calibration_mode: str = "residual"
    calibration_init: str | None = None
    calibration_std: float = 0.02
    train_projection_stage3: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=2e-3, steps=1500, batch_size=16))
    align: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, steps=400, batch_size=32))
    extender: ExtenderConfig = field(default_factory=ExtenderConfig)
    surgery: SurgeryConfig = field(default_factory=SurgeryConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, steps=600, batch_size=16))
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, steps=600, batch_size=16))
    pretrain_target: float = 0.95
    ablation_steps: int = 200

    def validate(self) -> None:
        self.model.validate()
        for t in (self.pretrain, self.align, self.extender.train, self.finetune, self.baseline):
            t.validate()
        if not 0.0 < self.extender.p <= 1.0:
            raise ConfigError("extender.p must lie in (0, 1]")
        if self.extender.source_counts not in ("pre", "post"):
            raise ConfigError("extender.source_counts must be 'pre' or 'post'")
        if self.data.n_e >= self.data.instructions:
            raise ConfigError("n_e must be smaller than the instruction corpus")

    def with_seed(self, seed: int) -> "RunConfig":
        out = from_dict(RunConfig, to_dict(self))
        out.seed = seed
        return out

    def digest(self) -> str:
        blob = json.dumps(to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def published_train_defaults() -> dict[str, TrainConfig]:
    """Cluster-scale hyperparameters as published for the two tuned stages."""
    return {
        "align": TrainConfig(lr=1e-3, batch_size=256, warmup_ratio=0.03, weight_decay=0.0, aux_coefficient=0.001),
        "finetune": TrainConfig(lr=2e-5, batch_size=128, warmup_ratio=0.03, weight_decay=0.0, aux_coefficient=0.001),
    }


def to_dict(obj) -> dict[str, Any]:
    return dataclasses.asdict(obj)


def from_dict(cls, data: dict[str, Any], where: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        sub = _DATACLASSES.get(ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""))
        kwargs[name] = from_dict(sub, value, f"{where}{name}.") if sub else value
    return cls(**kwargs)


_DATACLASSES = {
    c.__name__: c
    for c in (ModelConfig, FrontendConfig, DataConfig, TrainConfig, ExtenderConfig, SurgeryConfig, RunConfig)
}


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
