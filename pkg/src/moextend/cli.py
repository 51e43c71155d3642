"""``moextend`` command line: one subcommand per stage plus reporting and ablations.

Every command reads and writes fixed file names inside ``--out``. Failures
print one JSON line ``{"error": kind, "message": ...}`` to stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import pipeline as P
from .analysis import (
    distributions_csv,
    expert_distribution,
    fmt,
    forgetting_csv,
    forgetting_summary,
    shift_csv,
)
from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .extender import ExtenderResult, ExtensionPlan, SelectionCounts
from .model import Model
from .surgery import SurgeryError, build_manifest
from .training import DivergenceError, StageOrderError, StageReport, TargetNotReached

EXIT_CODES = {"usage": 2, "io": 3, "state": 4, "divergence": 5, "target": 6, "value": 7}

# stage recorded in a checkpoint's provenance -> file name
CKPT_NAMES = {
    "pretrain": "pretrain.ckpt",
    "align": "align.ckpt",
    "surgery": "surgery.ckpt",
    "finetune": "finetune.ckpt",
    "full": "full.ckpt",
}


class ProvenanceError(RuntimeError):
    pass


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ------------------------------------------------------------------ helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.validate()
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(cfg: RunConfig, stage: str) -> dict:
    return {"config_hash": cfg.digest(), "stage": stage, "seed": cfg.seed}


def _load(path: Path, cfg: RunConfig, want_stage: str) -> Model:
    model, prov = load_checkpoint(path)
    for key in ("config_hash", "stage", "seed"):
        if key not in prov:
            raise CheckpointError(path, f"provenance.{key}", "missing")
    if prov["config_hash"] != cfg.digest():
        raise ProvenanceError(f"{path}: provenance.config_hash {prov['config_hash']} does not match config {cfg.digest()}")
    if prov["seed"] != cfg.seed:
        raise ProvenanceError(f"{path}: provenance.seed {prov['seed']} does not match seed {cfg.seed}")
    if prov["stage"] != want_stage:
        raise ProvenanceError(f"{path}: provenance.stage is {prov['stage']!r}, expected {want_stage!r}")
    return model


def _ckpt_in(args, out: Path, stage: str) -> Path:
    return Path(args.ckpt) if args.ckpt else out / CKPT_NAMES[stage]


def _save(model: Model, out: Path, cfg: RunConfig, stage: str) -> Path:
    path = out / CKPT_NAMES[stage]
    save_checkpoint(model, path, _provenance(cfg, stage))
    return path


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _write_report(out: Path, report: StageReport) -> None:
    _write(out / f"{report.stage}_loss.csv", report.to_csv())


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _metrics_json(metrics: dict[str, float]) -> str:
    return _json({k: float(fmt(v)) for k, v in sorted(metrics.items())})


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise CheckpointError(path, "file", exc.strerror or str(exc)) from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(path, "json", str(exc)) from None


def _save_extender(out: Path, cfg: RunConfig, ext: ExtenderResult) -> None:
    plan = json.loads(ext.plan.to_json())
    plan["provenance"] = _provenance(cfg, "extender")
    _write(out / "plan.json", _json(plan))
    _write(out / "counts.json", _json({"before": ext.before.to_dict(), "after": ext.after.to_dict(),
                                       "provenance": _provenance(cfg, "extender")}))
    _write(out / "shift.csv", shift_csv(ext.plan.d, ext.plan.chosen_layers))
    _write_report(out, ext.report)


def _load_extender(out: Path, cfg: RunConfig) -> ExtenderResult:
    plan_path, counts_path = out / "plan.json", out / "counts.json"
    body, counts = _read_json(plan_path), _read_json(counts_path)
    for path, obj in ((plan_path, body), (counts_path, counts)):
        prov = obj.get("provenance", {})
        if prov.get("config_hash") != cfg.digest() or prov.get("seed") != cfg.seed:
            raise ProvenanceError(f"{path}: provenance does not match config {cfg.digest()} seed {cfg.seed}")
    try:
        plan = ExtensionPlan.from_json(json.dumps(body))
        before = SelectionCounts.from_dict(counts["before"])
        after = SelectionCounts.from_dict(counts["after"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(counts_path, "counts", str(exc)) from None
    return ExtenderResult(plan, before, after, StageReport("extender"))


# ------------------------------------------------------------------ commands


def cmd_init_config(args) -> int:
    cfg = RunConfig() if args.seed is None else RunConfig().with_seed(args.seed)
    path = Path(args.config) if args.config else _out(args) / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, path)
    print(path)
    return 0


def cmd_pretrain(args) -> int:
    cfg, out = _config(args), _out(args)
    corpora = P.build_corpora(cfg)
    model, rep = P.pretrain_base(cfg, corpora, args.log_every)
    _save(model, out, cfg, "pretrain")
    _write_report(out, rep)
    _write(out / "pretrain_eval.json", _metrics_json(P.evaluate(model, corpora)))
    return 0


def cmd_align(args) -> int:
    cfg, out = _config(args), _out(args)
    model = _load(_ckpt_in(args, out, "pretrain"), cfg, "pretrain")
    corpora = P.build_corpora(cfg)
    model, rep = P.align(model, cfg, corpora, args.log_every)
    _save(model, out, cfg, "align")
    _write_report(out, rep)
    _write(out / "align_eval.json", _metrics_json({**P.evaluate(model, corpora), **rep.metrics}))
    return 0


def cmd_extend(args) -> int:
    cfg, out = _config(args), _out(args)
    model = _load(_ckpt_in(args, out, "align"), cfg, "align")
    ext = P.extend(model, cfg, P.build_corpora(cfg))
    _save_extender(out, cfg, ext)
    return 0


def cmd_surgery(args) -> int:
    cfg, out = _config(args), _out(args)
    model = _load(_ckpt_in(args, out, "align"), cfg, "align")
    ext = _load_extender(out, cfg)
    P.surgery(model, cfg, ext)
    _save(model, out, cfg, "surgery")
    _write(out / "finetune_manifest.json", build_manifest(model, "finetune", cfg.surgery.train_projection_stage3).to_json() + "\n")
    return 0


def cmd_finetune(args) -> int:
    cfg, out = _config(args), _out(args)
    model = _load(_ckpt_in(args, out, "surgery"), cfg, "surgery")
    model, rep = P.finetune(model, cfg, P.build_corpora(cfg), args.log_every)
    _save(model, out, cfg, "finetune")
    _write_report(out, rep)
    _write(out / "finetune_eval.json", _metrics_json(rep.metrics))
    return 0


def cmd_baseline(args) -> int:
    cfg, out = _config(args), _out(args)
    model = _load(_ckpt_in(args, out, "align"), cfg, "align")
    model, rep = P.full_finetune_baseline(model, cfg, P.build_corpora(cfg), args.log_every)
    _save(model, out, cfg, "full")
    _write_report(out, rep)
    _write(out / "full_eval.json", _metrics_json(rep.metrics))
    return 0


def cmd_eval(args) -> int:
    cfg, out = _config(args), _out(args)
    if not args.ckpt:
        raise CliError("usage", "eval needs --ckpt")
    path = Path(args.ckpt)
    stage = read_manifest(path)[0].get("provenance", {}).get("stage")
    if stage not in CKPT_NAMES:
        raise CheckpointError(path, "provenance.stage", f"unknown stage {stage!r}")
    model = _load(path, cfg, stage)
    text = _metrics_json(P.evaluate(model, P.build_corpora(cfg)))
    _write(out / f"eval_{stage}.json", text)
    sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    cfg, out = _config(args), _out(args)
    corpora = P.build_corpora(cfg)
    base = _load(out / CKPT_NAMES["pretrain"], cfg, "pretrain")
    moe = _load(out / CKPT_NAMES["finetune"], cfg, "finetune")
    full = _load(out / CKPT_NAMES["full"], cfg, "full")
    ext = _load_extender(out, cfg)
    before = P.evaluate(base, corpora)
    summary = forgetting_summary({
        "moextend": {"before": before, "after": P.evaluate(moe, corpora)},
        "full": {"before": before, "after": P.evaluate(full, corpora)},
    })
    _write(out / "forgetting.csv", forgetting_csv(summary))
    _write(out / "shift.csv", shift_csv(ext.plan.d, ext.plan.chosen_layers))
    dist = expert_distribution(moe, corpora.s_e, "finetune", "s_e")
    _write(out / "distributions.csv", distributions_csv(dist))
    return 0


ABLATION_FIELDS = ("axis", "variant", "layers", "status", "final_loss", "task_a", "task_b",
                   "trainable_params", "diverged_step")


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_FIELDS)
    for r in rows:
        cells = []
        for name in ABLATION_FIELDS:
            v = getattr(r, name)
            if v is None:
                cells.append("")
            elif name == "layers":
                cells.append(" ".join(map(str, v)))
            elif isinstance(v, float):
                cells.append(fmt(v))
            else:
                cells.append(v)
        w.writerow(cells)
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg, out = _config(args), _out(args)
    if args.axis not in P.ABLATION_AXES:
        raise CliError("usage", f"--axis must be one of {list(P.ABLATION_AXES)}")
    aligned = _load(_ckpt_in(args, out, "align"), cfg, "align")
    corpora = P.build_corpora(cfg)
    try:
        ext = _load_extender(out, cfg)
    except CheckpointError:
        ext = P.extend(aligned, cfg, corpora)
        _save_extender(out, cfg, ext)
    rows = P.run_ablation(aligned, cfg, corpora, ext, args.axis, cfg.ablation_steps)
    _write(out / f"ablation_{args.axis}.csv", ablation_csv(rows))
    return 0


def cmd_run(args) -> int:
    """Whole chain in one process, writing the same artifacts as the stage commands."""
    for step in (cmd_pretrain, cmd_align, cmd_extend, cmd_surgery, cmd_finetune, cmd_baseline, cmd_report):
        ns = argparse.Namespace(**{**vars(args), "ckpt": None})
        step(ns)
    return 0


COMMANDS = {
    "init-config": cmd_init_config,
    "pretrain": cmd_pretrain,
    "align": cmd_align,
    "extend": cmd_extend,
    "surgery": cmd_surgery,
    "finetune": cmd_finetune,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "report": cmd_report,
    "ablate": cmd_ablate,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moextend", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config (defaults when omitted)")
        p.add_argument("--ckpt", help="input checkpoint (defaults to the stage file inside --out)")
        p.add_argument("--out", default="runs", help="artifact directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--axis", help="ablation axis: placement, init or calibration")
        p.add_argument("--log-every", type=int, default=0, help="print training progress every N steps")
    return parser


def _classify(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, (CheckpointError, ConfigError, OSError)):
        return "io"
    if isinstance(exc, (StageOrderError, ProvenanceError, SurgeryError)):
        return "state"
    if isinstance(exc, DivergenceError):
        return "divergence"
    if isinstance(exc, TargetNotReached):
        return "target"
    return "value"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, CheckpointError, ConfigError, OSError, StageOrderError, ProvenanceError, SurgeryError,
            DivergenceError, TargetNotReached, ValueError, KeyError, IndexError) as exc:
        kind = _classify(exc)
        msg = " ".join(str(exc).split())
        sys.stderr.write(json.dumps({"error": kind, "message": msg}) + "\n")
        return EXIT_CODES[kind]


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
