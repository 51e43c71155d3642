"""Structural extension: new experts, new router columns, calibration, freeze manifests."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ShapeError
from .model import Model
from .moe import CalibrationModule, MoeLayer
from .nn import param

INIT_SCHEMES = ("copy", "copy_argmax", "zero_router", "mean_router")
MANIFEST_STAGES = ("pretrain", "align", "extender", "finetune", "full")
PLACEMENTS = ("all_layer", "first_half", "second_half", "interval", "first_quarter", "first_interval", "extender")


class SurgeryError(RuntimeError):
    pass


def add_expert(layer: MoeLayer, source: int, allow_repeat: bool = False) -> MoeLayer:
    """Append a copy of expert ``source`` and a copy of its router column."""
    m = layer.n_experts
    if not 0 <= source < m:
        raise IndexError(f"source expert {source} out of range for {m} experts")
    if layer.n_experts > layer.n_base and not allow_repeat:
        raise SurgeryError("layer already extended; pass allow_repeat=True to stack extensions")
    if layer.calibration is not None:
        raise SurgeryError("extend experts before attaching calibration")
    column = layer.router.matrix()[:, source : source + 1].copy()
    _append(layer, layer.experts[source].copy(), column)
    return layer


def _append(layer: MoeLayer, expert, column: np.ndarray) -> None:
    layer.experts.append(expert)
    r = layer.router
    r.extra = param(column) if r.extra is None else param(np.concatenate([r.extra.data, column], axis=1))
    layer.check()


def pick_source(counts_col: np.ndarray) -> int:
    col = np.asarray(counts_col)
    if not np.any(col):
        raise ValueError("all-zero selection column")
    return int(np.argmax(col))  # first maximum, i.e. lower index on ties


def add_expert_with_init(layer: MoeLayer, scheme: str, counts_col=None, copy_index: int = 0,
                         allow_repeat: bool = False) -> MoeLayer:
    """Extend ``layer`` using one of the initialization schemes.

    ``copy`` clones expert ``copy_index`` and its column; ``copy_argmax``
    clones the most-selected expert; ``zero_router`` and ``mean_router``
    clone the most-selected expert but set the new column to zeros or to
    the mean of the existing columns.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    if scheme == "copy":
        return add_expert(layer, copy_index, allow_repeat)
    if counts_col is None:
        raise ValueError(f"scheme {scheme!r} needs selection counts")
    src = pick_source(counts_col)
    add_expert(layer, src, allow_repeat)
    if scheme != "copy_argmax":
        w = layer.router.matrix()[:, : layer.n_experts - 1]
        new = np.zeros((w.shape[0], 1)) if scheme == "zero_router" else w.mean(axis=1, keepdims=True)
        layer.router.extra.data[:, -1:] = new
    return layer


def attach_calibration(model: Model, kind: str = "type2", mode: str = "residual", init: str | None = None,
                       init_std: float = 0.02, seed: int = 0) -> Model:
    """Give every MoE layer a calibration module sized to its current expert count."""
    layers = model.moe_layers()
    if any(layer.calibration is not None for layer in layers):
        raise SurgeryError("calibration already attached")
    rng = np.random.default_rng([seed, 0xCA])
    for layer in layers:
        layer.calibration = CalibrationModule(kind, mode, layer.d_model, layer.n_experts, rng,
                                              init=init, init_std=init_std, gelu=layer.gelu)
        layer.check()
    return model


def placement_layers(name: str, n_layers: int, chosen: list[int] | None = None) -> list[int]:
    """Layer indices that receive a new expert under a placement scheme."""
    half, quarter = n_layers // 2, n_layers // 4
    table = {
        "all_layer": list(range(n_layers)),
        "first_half": list(range(half)),
        "second_half": list(range(half, n_layers)),
        "interval": list(range(0, n_layers, 2)),
        "first_quarter": list(range(max(1, quarter))),
        "first_interval": list(range(0, half, 2)),
    }
    if name == "extender":
        if chosen is None:
            raise ValueError("extender placement needs the chosen layers")
        return sorted(int(j) for j in chosen)
    if name not in table:
        raise ValueError(f"unknown placement {name!r}")
    return table[name]


def extend_model(model: Model, layers: list[int], counts: np.ndarray | None, scheme: str = "copy_argmax",
                 copy_index: int = 0, source_override: dict[int, int] | None = None) -> dict[int, int]:
    """Add one expert to each listed layer; returns layer -> source expert."""
    sources = {}
    for j in layers:
        layer = model.blocks[j].moe
        if source_override and j in source_override and scheme == "copy_argmax":
            add_expert(layer, source_override[j])
            sources[j] = source_override[j]
            continue
        col = None if counts is None else counts[:, j]
        add_expert_with_init(layer, scheme, col, copy_index)
        sources[j] = copy_index if scheme == "copy" else pick_source(col)
    model.history.append("surgery")
    return sources


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    path: str
    shape: list[int]
    trainable: bool


@dataclass
class TrainableManifest:
    stage: str
    entries: list[ManifestEntry] = field(default_factory=list)
    hazards: list[str] = field(default_factory=list)

    @property
    def trainable_count(self) -> int:
        return sum(int(np.prod(e.shape)) for e in self.entries if e.trainable)

    @property
    def frozen_count(self) -> int:
        return sum(int(np.prod(e.shape)) for e in self.entries if not e.trainable)

    @property
    def total_count(self) -> int:
        return self.trainable_count + self.frozen_count

    def trainable_paths(self) -> set[str]:
        return {e.path for e in self.entries if e.trainable}

    def to_json(self) -> str:
        body = {
            "stage": self.stage,
            "totals": {"trainable": self.trainable_count, "frozen": self.frozen_count, "total": self.total_count},
            "hazards": self.hazards,
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(body, indent=1)


def _is_trainable(path: str, stage: str, model: Model, train_projection: bool) -> bool:
    parts = path.split(".")
    if parts[0] == "frontend":
        if parts[1] == "encoder":
            return False
        return stage == "align" or (stage == "finetune" and train_projection)
    if stage in ("pretrain", "full"):
        return True
    if parts[0] != "blocks" or parts[2] != "moe":
        return False
    layer = model.blocks[int(parts[1])].moe
    kind = parts[3]
    if stage == "extender":
        return kind == "router" and parts[4] == "weight"
    if stage == "finetune":
        if kind == "experts":
            return int(parts[4]) >= layer.n_base
        if kind == "router":
            return parts[4] == "extra"
        return kind == "calibration"
    return False


def build_manifest(model: Model, stage: str, train_projection_stage3: bool = False) -> TrainableManifest:
    """Freeze/train partition of every parameter for a pipeline stage."""
    if stage not in MANIFEST_STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {MANIFEST_STAGES}")
    if stage == "align" and model.frontend is None:
        raise SurgeryError("alignment manifest needs an attached frontend")
    man = TrainableManifest(stage)
    for path, p in model.named_parameters():
        man.entries.append(ManifestEntry(path, list(p.shape), _is_trainable(path, stage, model, train_projection_stage3)))
    for j, layer in enumerate(model.moe_layers()):
        if layer.calibration is not None and layer.calibration.hazardous:
            man.hazards.append(f"blocks.{j}.moe.calibration: type2 multiplicative normal+normal is prone to gradient explosion")
    if stage == "finetune" and man.trainable_count == 0:
        raise SurgeryError("finetune manifest has no trainable parameters; run surgery first")
    return man


def apply_manifest(model: Model, manifest: TrainableManifest) -> list:
    """Set ``requires_grad`` from the manifest; returns the trainable tensors."""
    want = manifest.trainable_paths()
    own = dict(model.named_parameters())
    if set(own) != {e.path for e in manifest.entries}:
        raise ShapeError("manifest does not describe this model")
    out = []
    for path, p in own.items():
        flag = path in want
        p.set_requires_grad(flag)
        if flag:
            out.append(p)
    return out
