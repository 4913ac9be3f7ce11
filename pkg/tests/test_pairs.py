import pytest
import torch

from translearn.datamodel import Domain
from translearn.pairs import PairKind, build_pairs


def test_four_kinds_and_labels():
    torch.manual_seed(0)
    x_s, x_t = torch.rand(3, 3, 8, 4), torch.rand(3, 3, 8, 4)
    G = lambda x: x + 1
    F = lambda x: x - 1
    pairs = build_pairs(x_s, x_t, G, F)
    assert [p.kind for p in pairs] == [PairKind.POS_SRC, PairKind.POS_TGT, PairKind.NEG_SRC, PairKind.NEG_TGT]
    assert [p.label_i for p in pairs] == [1, 1, 0, 0]
    pos_s, pos_t, neg_s, neg_t = pairs
    assert torch.equal(pos_s.left, x_s) and torch.equal(pos_s.right, x_s + 1)
    assert torch.equal(pos_t.left, x_t) and torch.equal(pos_t.right, x_t - 1)
    assert torch.equal(neg_s.left, x_s + 1) and torch.equal(neg_s.right, x_t)
    assert torch.equal(neg_t.left, x_t - 1) and torch.equal(neg_t.right, x_s)
    assert all(len(p) == 3 for p in pairs)


def test_origins():
    x = torch.zeros(1, 3, 8, 4)
    pairs = build_pairs(x, x, translated=(x, x))
    assert pairs[0].origins == (Domain.SOURCE, Domain.SOURCE)
    assert pairs[1].origins == (Domain.TARGET, Domain.TARGET)
    assert pairs[2].origins == (Domain.SOURCE, Domain.TARGET)
    assert pairs[3].origins == (Domain.TARGET, Domain.SOURCE)


def test_gradients_reach_generator():
    G = torch.nn.Conv2d(3, 3, 1)
    F = torch.nn.Conv2d(3, 3, 1)
    x_s, x_t = torch.rand(2, 3, 8, 4), torch.rand(2, 3, 8, 4)
    pairs = build_pairs(x_s, x_t, G, F)
    sum(p.left.sum() + p.right.sum() for p in pairs).backward()
    assert G.weight.grad is not None and F.weight.grad is not None


def test_batch_mismatch():
    with pytest.raises(ValueError, match="batch size"):
        build_pairs(torch.zeros(2, 3, 8, 4), torch.zeros(3, 3, 8, 4), translated=(None, None))


def test_needs_translators():
    with pytest.raises(ValueError):
        build_pairs(torch.zeros(1, 3, 8, 4), torch.zeros(1, 3, 8, 4))
