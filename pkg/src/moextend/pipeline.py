"""End-to-end stage orchestration on the synthetic corpora."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, TrainConfig, from_dict, to_dict
from .data import SplitSpec, Vocab, World, gen_task_a, gen_task_b, split
from .extender import ExtenderResult, run_extender
from .frontend import Frontend
from .model import Model
from .surgery import apply_manifest, attach_calibration, build_manifest, extend_model, placement_layers
from .training import (
    PREREQUISITES,
    DivergenceError,
    StageOrderError,
    StageReport,
    TargetNotReached,
    task_a_accuracy,
    task_b_accuracy,
    train_loop,
)


@dataclass
class Corpora:
    vocab: Vocab
    world: World
    task_a_train: list
    task_a_eval: list
    captions: list
    instructions: list
    s_t: list
    s_e: list
    task_b_eval: list


def build_corpora(cfg: RunConfig) -> Corpora:
    """Every corpus is a pure function of the data seeds, never of the run seed."""
    d = cfg.data
    world = World.build(d, cfg.frontend.prefix_len, cfg.frontend.f_raw)
    ws = d.world_seed
    instructions = gen_task_b(ws + 3, d.instructions, "instruction", world)
    s_t, s_e = split(instructions, SplitSpec(ws, d.n_e))
    return Corpora(
        vocab=world.vocab,
        world=world,
        task_a_train=gen_task_a(ws, d.task_a_train, d),
        task_a_eval=gen_task_a(ws + 1, d.task_a_eval, d),
        captions=gen_task_b(ws + 2, d.captions, "caption", world),
        instructions=instructions,
        s_t=s_t,
        s_e=s_e,
        task_b_eval=gen_task_b(ws + 4, d.task_b_eval, "instruction", world),
    )


def _seeded(tc: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**tc.__dict__, "seed": seed})


def check_prerequisites(model: Model, stage: str) -> None:
    for need in PREREQUISITES[stage]:
        if need not in model.history:
            raise StageOrderError(f"stage {stage!r} requires {need!r}; model history is {model.history}")
    if stage in ("align", "extender", "full") and "surgery" in model.history:
        raise StageOrderError(f"stage {stage!r} cannot run on an extended model")
    if stage == "full" and "full" in model.history:
        raise StageOrderError("full fine-tuning already applied")


def run_stage(model: Model, stage: str, tc: TrainConfig, samples, train_projection_stage3: bool = False,
              log_every: int = 0) -> tuple[Model, StageReport]:
    """Train the manifest-trainable parameters of ``model`` in place."""
    check_prerequisites(model, stage)
    params = apply_manifest(model, build_manifest(model, stage, train_projection_stage3))
    report = train_loop(model, samples, tc, stage, params, log_every=log_every)
    for p in model.parameters():
        p.set_requires_grad(False)
    model.history.append(stage)
    return model, report


def evaluate(model: Model, corpora: Corpora) -> dict[str, float]:
    out = {"task_a": task_a_accuracy(model, corpora.task_a_eval, corpora.vocab)}
    out["task_b"] = task_b_accuracy(model, corpora.task_b_eval, corpora.vocab, use_prefix=model.frontend is not None)
    return out


def pretrain_base(cfg: RunConfig, corpora: Corpora, log_every: int = 0) -> tuple[Model, StageReport]:
    mc = cfg.model
    if mc.vocab_size is None:
        mc = type(mc)(**{**mc.__dict__, "vocab_size": corpora.vocab.size})
    model = Model(mc, seed=cfg.seed)
    model, report = run_stage(model, "pretrain", _seeded(cfg.pretrain, cfg.seed), corpora.task_a_train,
                              log_every=log_every)
    acc = task_a_accuracy(model, corpora.task_a_eval, corpora.vocab)
    report.metrics["task_a"] = acc
    if acc < cfg.pretrain_target:
        raise TargetNotReached(acc, cfg.pretrain_target)
    return model, report


def align(model: Model, cfg: RunConfig, corpora: Corpora, log_every: int = 0) -> tuple[Model, StageReport]:
    check_prerequisites(model, "align")
    if model.frontend is None:
        model.frontend = Frontend(cfg.frontend, model.cfg.d_model, seed=cfg.seed, gelu=model.cfg.gelu)
    model, report = run_stage(model, "align", _seeded(cfg.align, cfg.seed), corpora.captions, log_every=log_every)
    report.metrics["caption"] = task_b_accuracy(model, corpora.captions[:512], corpora.vocab)
    return model, report


def extend(model: Model, cfg: RunConfig, corpora: Corpora) -> ExtenderResult:
    check_prerequisites(model, "extender")
    ec = cfg.extender
    return run_extender(model, corpora.s_t, corpora.s_e, _seeded(ec.train, cfg.seed), ec.p, ec.source_counts)


def surgery(model: Model, cfg: RunConfig, result: ExtenderResult | None) -> dict[int, int]:
    """Extend the placement's layers and attach calibration everywhere (in place)."""
    sc = cfg.surgery
    if "surgery" in model.history:
        raise StageOrderError("surgery already applied")
    chosen = None if result is None else result.plan.chosen_layers
    layers = placement_layers(sc.placement, model.n_layers, chosen)
    counts = None if result is None else result.before.matrix
    if cfg.extender.source_counts == "post" and result is not None:
        counts = result.after.matrix
    if counts is None and sc.init_scheme != "copy":
        raise ValueError(f"init scheme {sc.init_scheme!r} needs extender counts")
    sources = extend_model(model, layers, counts, sc.init_scheme, sc.copy_index)
    attach_calibration(model, sc.calibration_kind, sc.calibration_mode, sc.calibration_init,
                       sc.calibration_std, seed=cfg.seed)
    return sources


def finetune(model: Model, cfg: RunConfig, corpora: Corpora, log_every: int = 0) -> tuple[Model, StageReport]:
    model, report = run_stage(model, "finetune", _seeded(cfg.finetune, cfg.seed), corpora.instructions,
                              cfg.surgery.train_projection_stage3, log_every)
    report.metrics.update(evaluate(model, corpora))
    return model, report


def full_finetune_baseline(model: Model, cfg: RunConfig, corpora: Corpora,
                           log_every: int = 0) -> tuple[Model, StageReport]:
    model, report = run_stage(model, "full", _seeded(cfg.baseline, cfg.seed), corpora.instructions,
                              log_every=log_every)
    report.metrics.update(evaluate(model, corpora))
    return model, report


@dataclass
class ExperimentResult:
    base_metrics: dict[str, float]
    aligned_metrics: dict[str, float]
    extender: ExtenderResult
    moextend: dict[str, float]
    full: dict[str, float]
    reports: dict[str, StageReport] = field(default_factory=dict)
    models: dict[str, Model] = field(default_factory=dict)

    def drops(self) -> dict[str, float]:
        before = self.base_metrics["task_a"]
        return {"moextend": before - self.moextend["task_a"], "full": before - self.full["task_a"]}


def run_experiment(cfg: RunConfig, corpora: Corpora | None = None, log_every: int = 0,
                   keep_models: bool = False) -> ExperimentResult:
    cfg.validate()
    corpora = corpora or build_corpora(cfg)
    base, r0 = pretrain_base(cfg, corpora, log_every)
    base_metrics = evaluate(base, corpora)
    aligned, r1 = align(base.clone(), cfg, corpora, log_every)
    aligned_metrics = evaluate(aligned, corpora)
    ext = extend(aligned, cfg, corpora)
    moe = aligned.clone()
    surgery(moe, cfg, ext)
    moe, r3 = finetune(moe, cfg, corpora, log_every)
    full, rf = full_finetune_baseline(aligned.clone(), cfg, corpora, log_every)
    out = ExperimentResult(base_metrics, aligned_metrics, ext, dict(r3.metrics), dict(rf.metrics),
                           {"pretrain": r0, "align": r1, "extender": ext.report, "finetune": r3, "full": rf})
    if keep_models:
        out.models = {"base": base, "aligned": aligned, "moextend": moe, "full": full}
    return out


def param_snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


# ------------------------------------------------------------------ ablations

ABLATION_AXES = ("placement", "init", "calibration")
CALIBRATION_GRID = (
    ("type1-additive-zero", "type1", "additive", "zero"),
    ("type1-multiplicative-one", "type1", "multiplicative", "one"),
    ("type2-additive-zero+normal", "type2", "additive", "zero+normal"),
    ("type2-residual-zero+normal", "type2", "residual", "zero+normal"),
    ("type2-multiplicative-normal+normal", "type2", "multiplicative", "normal+normal"),
)


def ablation_variants(axis: str, n_experts: int) -> list[tuple[str, dict]]:
    """``(variant name, SurgeryConfig overrides)`` for every point on an axis."""
    if axis == "placement":
        names = ("all_layer", "first_half", "second_half", "interval", "first_quarter", "first_interval", "extender")
        return [(n, {"placement": n}) for n in names]
    if axis == "init":
        out = [(f"copy({i})", {"init_scheme": "copy", "copy_index": i}) for i in range(n_experts)]
        return out + [("copy_argmax", {"init_scheme": "copy_argmax"}), ("zero_router", {"init_scheme": "zero_router"}),
                      ("mean_router", {"init_scheme": "mean_router"})]
    if axis == "calibration":
        return [(n, {"calibration_kind": k, "calibration_mode": m, "calibration_init": i})
                for n, k, m, i in CALIBRATION_GRID]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


@dataclass
class AblationRow:
    axis: str
    variant: str
    layers: list[int]
    status: str
    final_loss: float | None = None
    task_a: float | None = None
    task_b: float | None = None
    trainable_params: int = 0
    diverged_step: int | None = None
    detail: str = ""


def run_ablation(aligned: Model, cfg: RunConfig, corpora: Corpora, ext: ExtenderResult, axis: str,
                 steps: int | None = None) -> list[AblationRow]:
    rows = []
    for name, overrides in ablation_variants(axis, aligned.moe_layers()[0].n_experts):
        vcfg = from_dict(RunConfig, to_dict(cfg))
        for k, v in overrides.items():
            setattr(vcfg.surgery, k, v)
        if steps is not None:
            vcfg.finetune.steps = steps
        model = aligned.clone()
        layers = placement_layers(vcfg.surgery.placement, model.n_layers, ext.plan.chosen_layers)
        try:
            surgery(model, vcfg, ext)
            model, rep = finetune(model, vcfg, corpora)
        except DivergenceError as exc:
            rows.append(AblationRow(axis, name, layers, "diverged", diverged_step=exc.step, detail=str(exc)))
            continue
        rows.append(AblationRow(axis, name, layers, "ok", rep.final_loss(), rep.metrics["task_a"],
                                rep.metrics["task_b"], rep.trainable_params))
    return rows
