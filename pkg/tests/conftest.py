from __future__ import annotations

import numpy as np
import pytest

from moextend import autodiff as ad
from moextend.config import DataConfig, FrontendConfig, ModelConfig, RunConfig, TrainConfig
from moextend.data import Vocab


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else float(num / den)


def numeric_grad(f, t: ad.Tensor, h: float = 1e-5, idx=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` at flat positions ``idx`` of ``t.data``."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = float(f().data)
        flat[i] = old - h
        down = float(f().data)
        flat[i] = old
        out[j] = (up - down) / (2 * h)
    return out


def check_grads(f, tensors, h: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    ``max_entries`` probes a random subset of each tensor's entries.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.set_requires_grad(True)
        t.zero_grad()
    f().backward()
    worst = 0.0
    for t in tensors:
        n = t.data.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        analytic = t.grad.reshape(-1)[idx].copy()
        worst = max(worst, rel_error(analytic, numeric_grad(f, t, h, idx)))
    return worst


def tiny_config(seed: int = 0) -> RunConfig:
    """Two-layer D=8 setup that runs every stage in seconds."""
    data = DataConfig(task_a_train=64, task_a_eval=32, captions=48, instructions=64, task_b_eval=32, n_e=16)
    vocab = Vocab.from_config(data)
    cfg = RunConfig(
        seed=seed,
        model=ModelConfig(d_model=8, n_layers=2, n_experts=4, top_k=2, n_heads=2, vocab_size=vocab.size),
        frontend=FrontendConfig(f_raw=4, f_enc=6, prefix_len=2),
        data=data,
        pretrain=TrainConfig(lr=1e-2, steps=4, batch_size=8),
        align=TrainConfig(lr=1e-2, steps=3, batch_size=8),
        finetune=TrainConfig(lr=1e-2, steps=3, batch_size=8),
        baseline=TrainConfig(lr=1e-2, steps=3, batch_size=8),
        pretrain_target=0.0,
        ablation_steps=2,
    )
    cfg.extender.train = TrainConfig(lr=1e-2, steps=3, batch_size=8)
    return cfg


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(ACCEPTANCE[n])
    assert ok, ACCEPTANCE[n]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
