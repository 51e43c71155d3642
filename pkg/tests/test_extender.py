import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moextend import pipeline as P
from moextend.autodiff import ShapeError
from moextend.config import TrainConfig
from moextend.extender import (
    EmptyDataError,
    ExtensionPlan,
    SelectionCounts,
    count_selections,
    normalize_counts,
    pick_source_expert,
    select_layers,
    shift_statistic,
    tune_routers,
)


def counts(matrix, k=2):
    m = np.asarray(matrix, dtype=np.int64)
    return SelectionCounts(m, int(m[:, 0].sum()) // k, k)


def test_normalize_examples():
    assert np.allclose(normalize_counts(counts([[6], [4]])), [[0.6], [0.4]])
    uni = normalize_counts(counts(np.full((4, 3), 5), k=2))
    assert np.allclose(uni, 0.25)
    with pytest.raises(EmptyDataError):
        normalize_counts(SelectionCounts(np.zeros((2, 2), dtype=np.int64), 0, 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(1, 40), st.data())
def test_normalized_columns_sum_to_one(m, n_layers, tokens, data):
    k = data.draw(st.integers(1, m))
    cols = []
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    for _ in range(n_layers):
        c = np.zeros(m, dtype=np.int64)
        for _ in range(tokens):
            c[rng.choice(m, k, replace=False)] += 1
        cols.append(c)
    r = SelectionCounts(np.stack(cols, axis=1), tokens, k)
    r.check()
    assert np.allclose(normalize_counts(r).sum(axis=0), 1.0, atol=1e-12)


def test_shift_examples():
    a = np.array([[0.6], [0.4]])
    assert shift_statistic(a, a).tolist() == [0.0]
    assert np.isclose(shift_statistic(a, [[0.5], [0.5]])[0], 0.1)
    d = shift_statistic([[0.55], [0.15], [0.15], [0.15]], [[0.25], [0.25], [0.25], [0.25]])
    assert abs(d[0] - math.sqrt(0.12 / 4)) < 1e-12
    with pytest.raises(ShapeError):
        shift_statistic(np.zeros((2, 3)), np.zeros((3, 3)))


def test_select_layers_examples():
    assert select_layers([0.3, 0.1, 0.3, 0.2], 0.5) == [0, 2]
    assert select_layers([0.1, 0.2, 0.3], 1.0) == [0, 1, 2]
    assert len(select_layers([0.5, 0.4, 0.3, 0.2, 0.1], 0.5)) == 2
    assert select_layers([0.0] * 4, 0.5) == [0, 1]
    with pytest.raises(ValueError):
        select_layers([0.1, 0.2, 0.3], 0.2)
    with pytest.raises(ValueError):
        select_layers([0.1], 0.0)


def test_pick_source_examples():
    r = counts(np.array([[3, 0, 2], [9, 0, 2], [9, 10, 2], [1, 0, 2]]), k=1)
    assert pick_source_expert(r, 0) == 1
    assert pick_source_expert(r, 1) == 2
    assert pick_source_expert(counts([[4]], k=1), 0) == 0
    with pytest.raises(EmptyDataError):
        pick_source_expert(SelectionCounts(np.zeros((2, 1), dtype=np.int64), 0, 1), 0)


def test_plan_json_roundtrip(tmp_path):
    plan = ExtensionPlan(0.5, [0.1, 0.3, 0.2, 0.0], [1, 2], {1: 3, 2: 0})
    path = tmp_path / "plan.json"
    plan.save(path)
    assert ExtensionPlan.load(path) == plan
    with pytest.raises(ValueError):
        ExtensionPlan.from_json('{"p": 0.5}')


@pytest.fixture(scope="module")
def aligned(request):
    from conftest import tiny_config

    cfg = tiny_config()
    corpora = P.build_corpora(cfg)
    base, _ = P.pretrain_base(cfg, corpora)
    model, _ = P.align(base, cfg, corpora)
    return cfg, corpora, model


def test_tune_routers_zero_steps_is_identity(aligned):
    cfg, corpora, model = aligned
    tuned, _ = tune_routers(model, corpora.s_t, TrainConfig(steps=0))
    for (n, a), (_, b) in zip(model.named_parameters(), tuned.named_parameters()):
        assert np.array_equal(a.data, b.data), n
    before = count_selections(model, corpora.s_e)
    after = count_selections(tuned, corpora.s_e)
    d = shift_statistic(normalize_counts(before), normalize_counts(after))
    assert np.all(d == 0.0)


def test_tune_routers_touches_only_routers(aligned):
    cfg, corpora, model = aligned
    tuned, _ = tune_routers(model, corpora.s_t, TrainConfig(lr=1e-2, steps=3, batch_size=8))
    changed = set()
    for (n, a), (_, b) in zip(model.named_parameters(), tuned.named_parameters()):
        if not np.array_equal(a.data, b.data):
            changed.add(n)
    assert changed and all(n.endswith("moe.router.weight") for n in changed)


def test_count_selections_threads_and_totals(aligned):
    cfg, corpora, model = aligned
    one = count_selections(model, corpora.s_e, batch_size=4)
    many = count_selections(model, corpora.s_e, batch_size=4, threads=3)
    assert np.array_equal(one.matrix, many.matrix)
    tokens = sum(cfg.frontend.prefix_len + len(s.tokens) for s in corpora.s_e)
    assert one.total_tokens == tokens
    assert np.all(one.matrix.sum(axis=0) == 2 * tokens)


def test_extender_deterministic(aligned):
    cfg, corpora, model = aligned
    a, b = P.extend(model, cfg, corpora), P.extend(model, cfg, corpora)
    assert a.plan == b.plan
    assert len(a.plan.chosen_layers) == math.floor(cfg.extender.p * model.n_layers)
    assert all(x >= 0 for x in a.plan.d)
