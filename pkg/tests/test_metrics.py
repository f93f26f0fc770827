import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flglm.metrics import (ContractError, MetricReport, accuracy, bleu_4, choose, label_prob, lcs_length,
                           model_logits_fn, multi_token_score, rouge_l, rouge_n, score_pairs, token_accuracy)
from flglm.model import GLMModel, ModelConfig

from oracles import SOFTMAX_LN, rouge1_ref, softmax_ref


def fixed_logits(last_row, vocab=8, length=None):
    """logits_fn whose final position is ``last_row``; earlier rows are zero."""
    def fn(ids):
        out = np.zeros((len(ids), vocab))
        out[-1] = last_row
        return out
    return fn


def test_rouge1_hand_example():
    assert rouge_n("the cat sat", "the cat", 1) == pytest.approx(0.8, abs=1e-12)
    assert rouge1_ref("the cat sat".split(), "the cat".split()) == pytest.approx(0.8, abs=1e-12)


@pytest.mark.parametrize("text", ["a", "the cat sat on the mat", "x y x y x y z"])
def test_identical_strings_score_one(text):
    for m in (lambda a, b: rouge_n(a, b, 1), lambda a, b: rouge_n(a, b, 2), rouge_l, bleu_4):
        assert m(text, text) == pytest.approx(1.0, abs=1e-12)


def test_disjoint_vocab_scores_zero():
    for m in (lambda a, b: rouge_n(a, b, 1), lambda a, b: rouge_n(a, b, 2), rouge_l, bleu_4):
        assert m("a b c d", "w x y z") == 0.0


def test_empty_reference_is_zero(caplog):
    assert rouge_n("a b", "") == 0.0
    assert rouge_l("a b", "") == 0.0
    assert bleu_4("a b", "") == 0.0
    assert "empty reference" in caplog.text


def test_lcs_and_rouge_l():
    assert lcs_length("abcbdab", "bdcaba") == 4
    assert rouge_l("a b c d", "a c d") == pytest.approx(2 * (3 / 4) * 1 / (3 / 4 + 1))


def test_bleu_brevity_penalty():
    ref = "a b c d e f g h"
    cand = "a b c d"
    assert bleu_4(cand, ref) == pytest.approx(math.exp(1 - 8 / 4))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=12), st.lists(st.integers(0, 6), min_size=1, max_size=12))
def test_rouge1_matches_oracle(a, b):
    assert rouge_n(a, b, 1) == pytest.approx(rouge1_ref(a, b), abs=1e-12)


def test_token_accuracy_and_accuracy():
    assert token_accuracy([1, 2, 3], [1, 0, 3, 4]) == 0.5
    assert accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        accuracy([0], [0, 1])


def test_label_prob_equal_logits():
    p = label_prob(fixed_logits(np.zeros(8)), [1, 2], [[4], [5]])
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)


def test_label_prob_restricted_softmax():
    row = np.full(8, 7.0)
    row[[4, 5, 6]] = [0.0, math.log(2), math.log(3)]
    p = label_prob(fixed_logits(row), [1], [[4], [5], [6]])
    np.testing.assert_allclose(p, SOFTMAX_LN, atol=1e-12)
    np.testing.assert_allclose(p, softmax_ref([0.0, math.log(2), math.log(3)]), atol=1e-12)


def test_label_prob_shift_invariant_and_normalised():
    cfg = ModelConfig(n_blocks=3, hidden_size=16, n_heads=2, vocab_size=20, max_seq_len=10)
    fn = model_logits_fn(GLMModel(cfg, seed=1))
    p = label_prob(fn, [1, 5, 6, 7], [[4], [8], [9]])
    assert abs(p.sum() - 1) <= 1e-12
    shifted = lambda ids: fn(ids) + np.where(np.isin(np.arange(20), [4, 8, 9]), 3.5, 0.0)
    np.testing.assert_allclose(label_prob(shifted, [1, 5, 6, 7], [[4], [8], [9]]), p, atol=1e-12)


def test_label_prob_rejects_multi_token_answer():
    with pytest.raises(ContractError):
        label_prob(fixed_logits(np.zeros(8)), [1], [[4], [5, 6]])


def test_multi_token_score_uniform_model():
    v = 8
    assert multi_token_score(lambda ids: np.zeros((len(ids), v)), [1, 2], [3, 4, 5, 6]) == \
        pytest.approx(-4 * math.log(v), abs=1e-12)


def test_multi_token_score_one_hot_model_on_its_own_output():
    # model always predicts token (prev + 1) with certainty
    v = 10

    def fn(ids):
        out = np.full((len(ids), v), -1e9)
        out[np.arange(len(ids)), (np.asarray(ids) + 1) % v] = 0.0
        return out

    assert multi_token_score(fn, [1, 2], [3, 4, 5]) == 0.0
    assert choose(fn, [1, 2], [[5], [3], [7]]) == 1


def test_multi_token_score_matches_loop():
    cfg = ModelConfig(n_blocks=3, hidden_size=16, n_heads=2, vocab_size=20, max_seq_len=10)
    fn = model_logits_fn(GLMModel(cfg, seed=2))
    x, y = [1, 5, 6], [7, 8, 9]
    ref = 0.0
    for t in range(len(y)):
        row = fn(np.array(x + y[:t]))[-1]
        ref += math.log(softmax_ref(row)[y[t]])
    assert multi_token_score(fn, x, y) == pytest.approx(ref, abs=1e-10)
    with pytest.raises(ContractError):
        multi_token_score(fn, x, [])


def test_report_mean_and_score_pairs():
    r = score_pairs([[1, 2, 3], [4, 5]], [[1, 2, 3], [6, 7]])
    assert r.accuracy == pytest.approx(0.5) and r.rouge_1 == pytest.approx(0.5)
    m = MetricReport.mean([MetricReport(accuracy=1.0), MetricReport(accuracy=0.0)])
    assert m.accuracy == 0.5 and len(m.per_seed) == 2
    for v in m.to_dict().values():
        assert isinstance(v, (float, list))
