import json

import numpy as np
import pytest

from moextend import autodiff as ad
from moextend.autodiff import ShapeError, Tensor
from moextend.config import DataConfig, FrontendConfig
from moextend.data import (
    SplitSpec,
    TaskBSample,
    Vocab,
    World,
    collate,
    export_jsonl,
    gen_task_a,
    gen_task_b,
    load_jsonl,
    split,
    task_a_oracle,
)
from moextend.frontend import Frontend, ModalityEncoder, Projection, encode, project

from conftest import check_grads

CFG = DataConfig()
WORLD = World.build(CFG, 4, 16)


# ---------------------------------------------------------------- frontend


def test_encoder_linear_and_frozen():
    enc = ModalityEncoder(16, 32, seed=7)
    assert np.array_equal(encode(enc, np.zeros(16)), np.zeros(32))
    x = np.random.default_rng(0).normal(size=(3, 16))
    assert np.allclose(encode(enc, 2 * x), 2 * encode(enc, x), atol=1e-14)
    assert np.array_equal(encode(enc, x), encode(ModalityEncoder(16, 32, seed=7), x))
    with pytest.raises(ShapeError):
        encode(enc, np.zeros(15))
    with pytest.raises(RuntimeError):
        enc.set_trainable(True)


def test_projection_shape_and_errors():
    proj = Projection(6, 10, 8, np.random.default_rng(0))
    assert project(proj, np.zeros((4, 6))).shape == (4, 8)
    with pytest.raises(ShapeError):
        project(proj, np.zeros((4, 5)))


@pytest.mark.parametrize("seed", range(20))
def test_projection_gradients(seed):
    rng = np.random.default_rng(seed)
    proj = Projection(5, 6, 4, rng)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 4))
    assert check_grads(lambda: ad.tsum(project(proj, x) * w), proj.parameters()) < 1e-4


def test_encoder_gets_no_gradient():
    fe = Frontend(FrontendConfig(f_raw=4, f_enc=6, prefix_len=2), d_model=8)
    for p in fe.projection.parameters():
        p.set_requires_grad(True)
    ad.tsum(fe(np.ones((2, 2, 4)))).backward()
    assert fe.encoder.weight.grad is None
    assert all(np.any(p.grad != 0) for p in (fe.projection.w1, fe.projection.w2))


# ---------------------------------------------------------------- data


def test_task_a_deterministic_oracle_and_balanced():
    a, b = gen_task_a(3, 400, CFG), gen_task_a(3, 400, CFG)
    assert [s.tokens for s in a] == [s.tokens for s in b]
    vocab = Vocab.from_config(CFG)
    for s in a:
        assert task_a_oracle(s.tokens, vocab) == s.answer == s.tokens[-1]
        assert s.targets == [len(s.tokens) - 1]
    counts = np.bincount([s.answer - vocab.value0 for s in a], minlength=CFG.n_values)
    assert counts.max() - counts.min() == 0
    assert len(gen_task_a(0, 1, CFG)) == 1
    with pytest.raises(ValueError):
        gen_task_a(0, 0, CFG)


def test_task_b_oracle_and_schema():
    vocab = WORLD.vocab
    for kind in ("caption", "instruction"):
        a, b = gen_task_b(5, 200, kind, WORLD), gen_task_b(5, 200, kind, WORLD)
        assert all(np.array_equal(x.raw, y.raw) and x.tokens == y.tokens for x, y in zip(a, b))
        for s in a:
            assert WORLD.classify(s.raw) == s.label
            if kind == "caption":
                assert s.answer == vocab.name0 + s.label
                assert not any(vocab.question0 <= t < vocab.answer0 for t in s.tokens)
            else:
                assert s.answer == vocab.answer0 + WORLD.attributes[s.question, s.label]


def test_split_properties():
    data = list(range(50))
    s_t, s_e = split(data, SplitSpec(1, 10))
    assert len(s_t) + len(s_e) == 50 and len(s_e) == 10
    assert not set(s_t) & set(s_e)
    assert (s_t, s_e) == split(data, SplitSpec(1, 10))
    assert split(data, SplitSpec(1, 0))[1] == []
    with pytest.raises(ValueError):
        split(data, SplitSpec(1, 50))


def test_jsonl_roundtrip(tmp_path):
    samples = gen_task_b(1, 5, "instruction", WORLD) + gen_task_a(1, 3, CFG)
    path = tmp_path / "c.jsonl"
    export_jsonl(samples, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 8 and all(json.loads(x) for x in lines)
    back = load_jsonl(path)
    for a, b in zip(samples, back):
        assert a.tokens == b.tokens and a.targets == b.targets
        if isinstance(a, TaskBSample):
            assert np.array_equal(a.raw, b.raw) and a.label == b.label


def test_collate():
    batch = collate(gen_task_b(0, 4, "instruction", WORLD))
    assert batch.tokens.shape == (4, 3) and batch.raw.shape == (4, 4, 16)
    assert np.array_equal(batch.target_tok, batch.tokens[:, 2])
    with pytest.raises(ValueError):
        collate(gen_task_b(0, 2, "caption", WORLD) + gen_task_b(0, 2, "instruction", WORLD))


def test_prefix_batch_forward():
    fe = Frontend(FrontendConfig(), d_model=16)
    out = fe(np.zeros((3, 4, 16)))
    assert isinstance(out, Tensor) and out.shape == (3, 4, 16)
