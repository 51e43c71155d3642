import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moextend import autodiff as ad
from moextend import pipeline as P
from moextend.autodiff import Tensor
from moextend.nn import param
from moextend.config import ConfigError, TrainConfig
from moextend.moe import Routing
from moextend.optim import AdamW, clip_grad_norm, lr_at, warmup_steps
from moextend.training import DivergenceError, StageOrderError, aux_loss, train_loop

from conftest import check_grads, tiny_config

# ---------------------------------------------------------------- schedule


def test_lr_schedule_shape():
    total, peak = 100, 3e-3
    w = warmup_steps(total, 0.03)
    assert w == 3
    assert lr_at(0, total, peak, 0.03) == 0.0
    assert lr_at(w, total, peak, 0.03) == peak
    assert lr_at(1, total, peak, 0.03) == pytest.approx(peak / 3, rel=1e-15)
    lrs = [lr_at(s, total, peak, 0.03) for s in range(w, total)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    mid = w + (total - w) // 2
    assert lr_at(mid, total, peak, 0.03) == pytest.approx(peak * 0.5 * (1 + math.cos(math.pi * (mid - w) / (total - w))))
    assert lr_at(50, total, peak, 0.0, "constant") == peak


def test_config_validation():
    for bad in (TrainConfig(aux_coefficient=-1), TrainConfig(warmup_ratio=1.0), TrainConfig(schedule="step"),
                TrainConfig(batch_size=0)):
        with pytest.raises(ConfigError):
            bad.validate()


# ---------------------------------------------------------------- optimizer


def test_adamw_matches_reference():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(4)]
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.99, 1e-8, 0.1
    p = param(w0.copy())
    opt = AdamW([p], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    ref, m, v = w0.copy(), np.zeros_like(w0), np.zeros_like(w0)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref * (1 - lr * wd) - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    assert np.max(np.abs(p.data - ref)) < 1e-14


def test_clip_grad_norm():
    a, b = param(np.zeros(3)), param(np.zeros(4))
    a.grad, b.grad = np.array([3.0, 0, 0]), np.array([0, 4.0, 0, 0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert math.sqrt(np.sum(a.grad**2) + np.sum(b.grad**2)) == pytest.approx(1.0, rel=1e-10)
    a.grad = np.array([0.3, 0, 0])
    b.grad = np.zeros(4)
    clip_grad_norm([a, b], 1.0)
    assert np.array_equal(a.grad, [0.3, 0, 0])


# ---------------------------------------------------------------- aux loss


def routing(probs):
    probs = np.asarray(probs, dtype=float)
    return Routing(Tensor(probs), np.argsort(-probs, axis=1, kind="stable")[:, :1])


def test_aux_loss_analytic():
    assert float(aux_loss([routing([[1, 0], [0, 1]])]).data) == pytest.approx(1.0)
    assert float(aux_loss([routing([[1, 0, 0, 0]] * 5)]).data) == pytest.approx(4.0)
    # f = (1, 0), P = (0.6, 0.4): 2 * 0.6
    assert float(aux_loss([routing([[0.6, 0.4]] * 3)]).data) == pytest.approx(1.2)
    two = aux_loss([routing([[1, 0], [0, 1]]), routing([[1, 0]] * 2)])
    assert float(two.data) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        aux_loss([])
    with pytest.raises(ValueError):
        aux_loss([routing(np.zeros((0, 3)))])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 2**31))
def test_aux_loss_bounds(m, n, seed):
    rng = np.random.default_rng(seed)
    hard = np.eye(m)[rng.integers(m, size=n)]
    v = float(aux_loss([routing(hard)]).data)
    assert 1.0 - 1e-12 <= v <= m + 1e-12
    soft = rng.dirichlet(np.ones(m), size=n)
    assert float(aux_loss([routing(soft)]).data) <= m + 1e-12


def test_aux_loss_gradient():
    rng = np.random.default_rng(3)
    z = param(rng.normal(size=(6, 4)))
    top = np.argmax(z.data, axis=1)[:, None]
    f = lambda: aux_loss([Routing(ad.softmax(z, axis=-1), top)])  # noqa: E731
    assert check_grads(f, [z]) < 1e-6


# ---------------------------------------------------------------- loop


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_config()
    corpora = P.build_corpora(cfg)
    base, _ = P.pretrain_base(cfg, corpora)
    return cfg, corpora, base


def test_zero_lr_leaves_model_unchanged(setup):
    cfg, corpora, base = setup
    model = base.clone()
    for p in model.parameters():
        p.set_requires_grad(True)
    before = P.param_snapshot(model)
    train_loop(model, corpora.task_a_train, TrainConfig(lr=0.0, steps=3, batch_size=8), "pretrain")
    after = P.param_snapshot(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_deterministic(setup):
    cfg, corpora, base = setup
    runs = []
    for _ in range(2):
        model = base.clone()
        for p in model.parameters():
            p.set_requires_grad(True)
        rep = train_loop(model, corpora.task_a_train, TrainConfig(lr=1e-2, steps=4, batch_size=8), "pretrain")
        runs.append((rep.losses, P.param_snapshot(model)))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_divergence_is_detected(setup):
    cfg, corpora, base = setup
    model = base.clone()
    model.head.data[0, 0] = np.nan
    for p in model.parameters():
        p.set_requires_grad(True)
    with pytest.raises(DivergenceError) as info:
        train_loop(model, corpora.task_a_train, TrainConfig(steps=2, batch_size=8), "pretrain")
    assert info.value.step == 0 and info.value.stage == "pretrain"


def test_frozen_model_has_nothing_to_train(setup):
    cfg, corpora, base = setup
    with pytest.raises(StageOrderError):
        train_loop(base.clone(), corpora.task_a_train, TrainConfig(steps=1), "pretrain")


def test_stage_order(setup):
    cfg, corpora, base = setup
    with pytest.raises(StageOrderError):
        P.finetune(base.clone(), cfg, corpora)
    with pytest.raises(StageOrderError):
        P.extend(base.clone(), cfg, corpora)
    with pytest.raises(StageOrderError):
        P.full_finetune_baseline(base.clone(), cfg, corpora)
    aligned, _ = P.align(base.clone(), cfg, corpora)
    ext = P.extend(aligned, cfg, corpora)
    moe = aligned.clone()
    P.surgery(moe, cfg, ext)
    with pytest.raises(StageOrderError):
        P.surgery(moe, cfg, ext)
    with pytest.raises(StageOrderError):
        P.align(moe, cfg, corpora)
    with pytest.raises(StageOrderError):
        P.full_finetune_baseline(moe, cfg, corpora)
    full, _ = P.full_finetune_baseline(aligned.clone(), cfg, corpora)
    with pytest.raises(StageOrderError):
        P.full_finetune_baseline(full, cfg, corpora)


def test_stage_freezes_non_manifest_parameters(setup):
    cfg, corpora, base = setup
    aligned, _ = P.align(base.clone(), cfg, corpora)
    before = P.param_snapshot(base)
    after = P.param_snapshot(aligned)
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert not changed
    assert all(not p.requires_grad for p in aligned.parameters())


PARITY = """
import json, sys
sys.path.insert(0, {tests!r})
from conftest import tiny_config
from moextend import pipeline as P, _kernels
cfg = tiny_config()
c = P.build_corpora(cfg)
base, rep = P.pretrain_base(cfg, c)
print(json.dumps({{"numba": _kernels.USE_NUMBA, "losses": rep.losses}}))
"""


@pytest.mark.skipif(not __import__("moextend._kernels")._kernels.HAVE_NUMBA, reason="numba missing")
def test_numpy_and_numba_training_agree():
    tests = os.path.dirname(__file__)
    out = {}
    for flag in ("0", "1"):
        env = {**os.environ, "MOEXTEND_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", PARITY.format(tests=tests)], env=env,
                             capture_output=True, text=True, check=True)
        out[flag] = json.loads(res.stdout.strip().splitlines()[-1])
    assert not out["0"]["numba"] and out["1"]["numba"]
    a, b = np.array(out["0"]["losses"]), np.array(out["1"]["losses"])
    assert a.shape == b.shape and np.max(np.abs(a - b)) < 1e-10
