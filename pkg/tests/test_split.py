import numpy as np
import pytest

from flglm.model import ConfigError, GLMModel, ModelConfig
from flglm.split import (BoundaryShapeError, SplitPlan, StaleRoundError, reassemble, split, split_logits,
                         split_train_step)

import cases


def small(n=4):
    return ModelConfig(n_blocks=n, hidden_size=16, n_heads=2, vocab_size=20, max_seq_len=10)


def test_split_equivalence_subset():
    r = cases.split_equivalence(n_cases=12, seed=5)
    assert r["max_logit_diff"] <= 1e-9
    assert r["max_grad_rel_err"] <= 1e-9


def test_standard_plan_for_28_blocks():
    plan = SplitPlan.standard(28)
    assert plan.front_blocks == (0,)
    assert plan.body_blocks == tuple(range(1, 27))
    assert plan.tail_blocks == (27,)
    plan.validate(28)


@pytest.mark.parametrize("plan", [
    SplitPlan((0,), (1,), ()),
    SplitPlan((0,), (2,), (1, 3)),
    SplitPlan((1,), (0, 2), (3,)),
    SplitPlan((), (0, 1, 2), (3,)),
])
def test_bad_plans_rejected(plan):
    with pytest.raises(ConfigError):
        plan.validate(4)


def test_too_few_blocks():
    with pytest.raises(ConfigError):
        SplitPlan.standard(2)


def test_split_moves_parameters_out_of_model():
    m = GLMModel(small(), seed=0)
    n_before = len(m.named_parameters())
    front, body, tail = split(m)
    assert len(front.named_parameters()) + len(body.named_parameters()) + len(tail.named_parameters()) == n_before
    assert set(body.blocks) == {1, 2}
    assert not m.blocks


def test_reassemble_round_trip():
    ids = np.array([1, 5, 6, 7])
    ref = GLMModel(small(), seed=3).forward(ids).data
    back = reassemble(*split(GLMModel(small(), seed=3)))
    np.testing.assert_array_equal(back.forward(ids).data, ref)


def test_cache_is_single_use():
    front, body, tail = split(GLMModel(small(), seed=0))
    ids, tg = np.array([1, 4, 5]), np.array([4, 5, 6])
    split_train_step(front, body, tail, ids, tg, key=(0, 0))
    g = np.zeros((3, 1, 16))
    with pytest.raises(StaleRoundError):
        body.backward(g, key=(0, 0))
    with pytest.raises(StaleRoundError):
        front.backward(g, key=(0, 0))
    assert body.pending() == 0


def test_body_holds_concurrent_rounds():
    front, body, tail = split(GLMModel(small(), seed=0))
    for c in range(3):
        body.forward(front.forward(np.array([1, 4 + c]), key=(c, 0)), key=(c, 0))
    assert body.pending() == 3
    for c in (2, 0, 1):
        body.backward(np.ones((2, 1, 16)), key=(c, 0))
    assert body.pending() == 0


def test_boundary_shape_checks():
    front, body, tail = split(GLMModel(small(), seed=0))
    with pytest.raises(BoundaryShapeError):
        body.forward(np.zeros((3, 1, 15)))
    with pytest.raises(BoundaryShapeError):
        body.forward(np.zeros((11, 1, 16)))
    h = body.forward(front.forward(np.array([1, 2, 3]), key=(0, 1)), key=(0, 1))
    with pytest.raises(BoundaryShapeError):
        body.backward(np.zeros((2, 1, 16)), key=(0, 1))
    with pytest.raises(BoundaryShapeError):
        tail.forward_loss(h, np.array([1, 2]))


def test_split_logits_leaves_no_cache():
    front, body, tail = split(GLMModel(small(), seed=0))
    split_logits(front, body, tail, np.array([1, 2, 3]))
    assert body.pending() == 0 and len(front._cache) == 0


def test_empty_front_only_when_allowed():
    plan = SplitPlan((), (0, 1, 2), (3,))
    with pytest.raises(ConfigError):
        split(GLMModel(small(), seed=0), plan)
    front, body, tail = split(GLMModel(small(), seed=0), plan, allow_empty_front=True)
    assert not front.blocks
