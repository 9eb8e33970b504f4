import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mavlkit import numerics as nx
from mavlkit.matching_losses import (DetectionSet, LossWeights, assignment_cost, giou_tensor, hungarian,
                                     match_cost, pairwise_giou_np, set_loss, single_set_loss)
from mavlkit.numerics import Tensor
from mavlkit.oracles import best_assignment_bruteforce, set_loss_bruteforce


def test_hungarian_examples():
    assert hungarian(np.array([[5.0]])).pairs == [(0, 0)]
    a = hungarian(np.array([[1.0, 2.0], [2.0, 4.0]]))
    assert set(a.pairs) == {(0, 1), (1, 0)}
    assert assignment_cost(np.array([[1.0, 2.0], [2.0, 4.0]]), a) == 4.0


def test_hungarian_6x6_against_all_permutations():
    rng = np.random.default_rng(0)
    for _ in range(5):
        c = rng.integers(0, 20, (6, 6)).astype(float)
        best = min(sum(c[p[t], t] for t in range(6)) for p in itertools.permutations(range(6)))
        assert assignment_cost(c, hungarian(c)) == best


def test_hungarian_rectangular_and_errors():
    c = np.array([[3.0], [1.0], [2.0]])
    a = hungarian(c)
    assert a.pairs == [(1, 0)] and a.unmatched == [0, 2]
    with pytest.raises(ValueError):
        hungarian(np.ones((1, 2)))
    with pytest.raises(ValueError):
        hungarian(np.array([[np.nan]]))
    empty = hungarian(np.zeros((3, 0)))
    assert empty.pairs == [] and empty.unmatched == [0, 1, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))).flatmap(
    lambda nm: arrays(np.float64, nm, elements=st.integers(0, 3).map(float))))
def test_hungarian_tie_heavy_matches_lexicographic_bruteforce(c):
    best, pairs = best_assignment_bruteforce(c)
    a = hungarian(c)
    assert a.pairs == pairs
    assert assignment_cost(c, a) == best


def test_match_cost_examples():
    b = np.array([[0.5, 0.5, 0.2, 0.2]])
    c = match_cost(b, np.array([1.0]), b, LossWeights(1, 1, 1))
    assert c[0, 0] == -1.0
    obj = np.array([0.2, 0.7])
    only = match_cost(np.tile(b, (2, 1)), obj, np.array([[0.1, 0.1, 0.1, 0.1]] * 3), LossWeights(1, 0, 0))
    np.testing.assert_array_equal(only, -np.repeat(obj[:, None], 3, 1))
    l1 = match_cost(b, np.zeros(1), np.array([[0.5, 0.5, 0.4, 0.4]]), LossWeights(0, 1, 0))
    assert l1[0, 0] == pytest.approx(0.4)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)


def test_giou_tensor_matches_numpy_and_has_gradients():
    rng = np.random.default_rng(1)
    p = np.concatenate([rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.1, 0.3, (5, 2))], 1)
    t = np.concatenate([rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.1, 0.3, (5, 2))], 1)
    from mavlkit.matching_losses import cxcywh_to_xyxy_np

    ref = np.diag(pairwise_giou_np(cxcywh_to_xyxy_np(p), cxcywh_to_xyxy_np(t)))
    np.testing.assert_allclose(giou_tensor(Tensor(p), t).data, ref, atol=1e-15)
    assert nx.grad_check(lambda x: giou_tensor(x, t), [p]) < 1e-6


def _random_set(rng, Q):
    boxes = np.concatenate([rng.uniform(0.2, 0.8, (Q, 2)), rng.uniform(0.05, 0.4, (Q, 2))], 1)
    return boxes, rng.standard_normal(Q)


def test_set_loss_matches_permutation_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        Q = int(rng.integers(1, 7))
        m = int(rng.integers(0, Q + 1))
        boxes, logits = _random_set(rng, Q)
        tg, _ = _random_set(rng, m)
        fast = set_loss([DetectionSet(Tensor(boxes), Tensor(logits))], [tg]).item()
        slow = set_loss_bruteforce(boxes, 1 / (1 + np.exp(-logits)), tg)
        assert fast == pytest.approx(slow, abs=1e-12)


def test_zero_targets_leave_only_objectness_term():
    rng = np.random.default_rng(3)
    boxes, logits = _random_set(rng, 4)
    loss = set_loss([DetectionSet(Tensor(boxes), Tensor(logits))], [np.zeros((0, 4))]).item()
    expected = 2.0 * np.mean(np.log1p(np.exp(logits)))
    assert loss == pytest.approx(expected, abs=1e-12)


def test_perfect_prediction_limit():
    tg = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
    boxes = np.vstack([tg, [[0.5, 0.5, 0.1, 0.1]]])
    logits = np.array([40.0, 40.0, -40.0])
    assert set_loss([DetectionSet(Tensor(boxes), Tensor(logits))], [tg]).item() < 1e-15


def test_identical_heads_sum_exactly():
    rng = np.random.default_rng(4)
    boxes, logits = _random_set(rng, 6)
    tg, _ = _random_set(rng, 3)
    ds = DetectionSet(Tensor(boxes), Tensor(logits))
    one = set_loss([ds], [tg]).item()
    assert abs(set_loss([ds] * 6, [tg]).item() - 6 * one) <= 1e-12


def test_batched_loss_is_mean_of_images():
    rng = np.random.default_rng(5)
    b1, l1 = _random_set(rng, 5)
    b2, l2 = _random_set(rng, 5)
    t1, _ = _random_set(rng, 2)
    t2, _ = _random_set(rng, 4)
    w = LossWeights()
    batched = single_set_loss(DetectionSet(Tensor(np.stack([b1, b2])), Tensor(np.stack([l1, l2]))),
                              [t1, t2], w).item()
    parts = [single_set_loss(DetectionSet(Tensor(b), Tensor(l)), t, w).item()
             for b, l, t in ((b1, l1, t1), (b2, l2, t2))]
    assert batched == pytest.approx(np.mean(parts), abs=1e-12)


def test_include_mask_drops_heads():
    rng = np.random.default_rng(6)
    sets = []
    for _ in range(3):
        b, l = _random_set(rng, 4)
        sets.append(DetectionSet(Tensor(b), Tensor(l)))
    tg, _ = _random_set(rng, 2)
    total = set_loss(sets, [tg]).item()
    partial = set_loss(sets, [tg], include=[True, False, True]).item()
    assert partial == pytest.approx(total - set_loss(sets[1:2], [tg]).item(), abs=1e-12)
