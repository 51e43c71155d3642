"""Two-part checkpoint files: a JSON manifest line block, then raw little-endian f64.

Layout::

    MOEXTEND-CKPT/1 <manifest bytes>\\n
    <manifest JSON>
    <payload>

Tensor offsets in the manifest are relative to the first payload byte and
are authoritative; the loader never assumes tensors are packed in order.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .config import FrontendConfig, ModelConfig
from .frontend import Frontend
from .model import Model
from .moe import CalibrationModule
from .nn import param

MAGIC = "MOEXTEND-CKPT/1"
DTYPE = "f64-le"


class CheckpointError(OSError):
    def __init__(self, path, field: str, detail: str):
        super().__init__(f"{path}: {field}: {detail}")
        self.path, self.field = str(path), field


def save_checkpoint(model: Model, path: str | Path, provenance: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": MAGIC,
        "dtype": DTYPE,
        "model_config": dataclasses.asdict(model.cfg),
        "frontend_config": None if model.frontend is None else dataclasses.asdict(model.frontend.cfg),
        "architecture": model.architecture(),
        "history": list(model.history),
        "provenance": dict(provenance or {}),
        "payload_bytes": offset,
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {len(blob)}\n".encode())
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_manifest(path: str | Path) -> tuple[dict, bytes]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(path, "file", exc.strerror or str(exc)) from exc
    nl = data.find(b"\n")
    head = data[:nl].decode("ascii", "replace").split() if nl > 0 else []
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError(path, "header", f"expected '{MAGIC} <length>'")
    try:
        n = int(head[1])
    except ValueError:
        raise CheckpointError(path, "header", f"bad manifest length {head[1]!r}") from None
    start = nl + 1
    if start + n > len(data):
        raise CheckpointError(path, "manifest", "truncated")
    try:
        manifest = json.loads(data[start:start + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(path, "manifest", f"invalid JSON ({exc})") from None
    for key in ("dtype", "model_config", "architecture", "tensors", "payload_bytes", "history"):
        if key not in manifest:
            raise CheckpointError(path, key, "missing")
    if manifest["dtype"] != DTYPE:
        raise CheckpointError(path, "dtype", f"unsupported {manifest['dtype']!r}")
    payload = data[start + n:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(path, "payload_bytes", f"manifest says {manifest['payload_bytes']}, file has {len(payload)}")
    return manifest, payload


def _skeleton(manifest: dict, path) -> Model:
    try:
        cfg = ModelConfig(**manifest["model_config"])
        model = Model(cfg, seed=0)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(path, "model_config", str(exc)) from None
    layers = manifest["architecture"].get("layers", [])
    if len(layers) != model.n_layers:
        raise CheckpointError(path, "architecture", f"{len(layers)} layers for a {model.n_layers}-layer config")
    rng = np.random.default_rng(0)
    for layer, spec in zip(model.moe_layers(), layers):
        for _ in range(spec["n_experts"] - layer.n_experts):
            layer.experts.append(layer.experts[0].copy())
        if spec["router_extra"]:
            layer.router.extra = param(np.zeros((layer.d_model, spec["router_extra"])))
        cal = spec.get("calibration")
        if cal:
            layer.calibration = CalibrationModule(cal["kind"], cal["mode"], layer.d_model, layer.n_experts, rng,
                                                  init=cal["init"], hidden=cal["hidden"] or None, gelu=layer.gelu)
        layer.check()
    if manifest.get("frontend_config"):
        model.frontend = Frontend(FrontendConfig(**manifest["frontend_config"]), cfg.d_model, gelu=cfg.gelu)
    model.history = list(manifest["history"])
    return model


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    manifest, payload = read_manifest(path)
    model = _skeleton(manifest, path)
    state = {}
    for e in manifest["tensors"]:
        name = e.get("name", "?")
        shape = tuple(e["shape"])
        need = 8 * int(np.prod(shape))
        off = e["offset"]
        if e["nbytes"] != need or off < 0 or off + need > len(payload):
            raise CheckpointError(path, f"tensors[{name}]", "offset/size outside payload")
        state[name] = np.frombuffer(payload, dtype="<f8", count=need // 8, offset=off).reshape(shape).astype(np.float64)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(path, "tensors", str(exc).strip("'\"")) from None
    for p in model.parameters():
        p.set_requires_grad(False)
    return model, manifest.get("provenance", {})
