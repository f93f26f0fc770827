import numpy as np
import pytest

from flglm.data import (LABEL_TOKENS, DataPartition, PartitionError, cloze_classification, copa_skew_fractions,
                        copy_task, partition, zipf_corpus)
from flglm.tensor import IGNORE_INDEX


def labels_400():
    data = cloze_classification(400, seed=0)
    return np.array([s.label for s in data])


def test_cloze_balance_and_targets():
    data = cloze_classification(400, seed=0)
    y = np.array([s.label for s in data])
    assert (y == 0).sum() == 195 and (y == 1).sum() == 205
    s = data[0]
    assert s.targets[-1] == LABEL_TOKENS[s.label]
    assert (s.targets[:-1] == IGNORE_INDEX).all()


def test_iid_split_is_near_equal_halves():
    y = labels_400()
    zeros = []
    for seed in range(50):
        p = partition(y, "iid", 2, seed=seed)
        p.check(len(y))
        assert [len(x) for x in p.indices] == [200, 200]
        zeros.append(int((y[p.indices[0]] == 0).sum()))
    # about half of the 195 zeros land on each client
    assert abs(np.mean(zeros) - 97.5) < 3
    assert all(80 <= z <= 115 for z in zeros)


def test_label_skew_copa_layout():
    y = labels_400()
    p = partition(y, "label_skew", 2, seed=0, fractions=copa_skew_fractions())
    p.check(len(y))
    a, b = y[p.indices[0]], y[p.indices[1]]
    assert ((a == 0).sum(), (a == 1).sum()) == (195, 5)
    assert ((b == 0).sum(), (b == 1).sum()) == (0, 200)


def test_string_label_keys_accepted():
    y = labels_400()
    fr = {str(k): v for k, v in copa_skew_fractions().items()}
    partition(y, "label_skew", 2, fractions=fr).check(len(y))


@pytest.mark.parametrize("fractions", [
    {0: [0.5, 0.4], 1: [0.5, 0.5]},
    {0: [1.0], 1: [0.5, 0.5]},
    {0: [1.0, 0.0]},
    None,
])
def test_bad_fractions_rejected(fractions):
    with pytest.raises(PartitionError):
        partition(labels_400(), "label_skew", 2, fractions=fractions)


def test_unknown_mode_and_bad_cover():
    with pytest.raises(PartitionError):
        partition([0, 1], "dirichlet", 2)
    with pytest.raises(PartitionError):
        DataPartition("iid", [[0, 1], [1, 2]]).check(3)
    with pytest.raises(PartitionError):
        DataPartition("iid", [[0], [2]]).check(3)


def test_copy_task_scores_only_the_copy():
    (s,) = copy_task(1, seed=0, length=4)
    assert len(s.ids) == len(s.targets) == 9
    assert (s.targets[:4] == IGNORE_INDEX).all()
    # targets: SEP then the four symbols again
    assert s.targets[4] == s.ids[5]
    np.testing.assert_array_equal(s.targets[5:], s.ids[1:5])


def test_zipf_shards_share_ranks():
    a, b = zipf_corpus(300, seed=0), zipf_corpus(300, seed=1)
    ca = np.bincount(np.concatenate(a), minlength=256)
    cb = np.bincount(np.concatenate(b), minlength=256)
    assert np.argmax(ca) == np.argmax(cb)
