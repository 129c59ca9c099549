import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from diffsed import autodiff as ad
from diffsed.audio import EventAnnotation
from diffsed.autodiff import Tensor
from diffsed.gradcheck import check_gradients
from diffsed.matching import (
    Assignment,
    ClipTargets,
    LossWeights,
    cost_matrix,
    hungarian,
    match_batch,
    pair_cost,
    set_prediction_loss,
    temporal_iou,
)
from diffsed.model import EventProposal


def brute_force(c):
    """Exhaustive minimum over every injective gt -> prediction map."""
    n, m = c.shape
    best = None
    for rows in itertools.permutations(range(n), m):
        total = 0.0
        for j, i in enumerate(rows):
            total += c[i, j]
        if best is None or total < best:
            best = total
    return best


def test_hungarian_2x2():
    a = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert sorted(a.pairs) == [(0, 0), (1, 1)] and a.total_cost == 2.0


def test_hungarian_diagonal_zero():
    c = np.ones((4, 4)) - np.eye(4)
    a = hungarian(c)
    assert sorted(a.pairs) == [(i, i) for i in range(4)] and a.total_cost == 0.0


def test_hungarian_random_vs_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = rng.uniform(-1, 1, (6, 4))
        assert hungarian(c).total_cost == brute_force(c)


def test_hungarian_vs_scipy():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        m = int(rng.integers(0, n + 1))
        c = rng.standard_normal((n, m))
        r, col = linear_sum_assignment(c)
        assert hungarian(c).total_cost == pytest.approx(c[r, col].sum(), abs=1e-9)


def test_hungarian_is_injective():
    a = hungarian(np.random.default_rng(2).standard_normal((9, 7)))
    preds = [i for i, _ in a.pairs]
    assert len(set(preds)) == 7 and sorted(j for _, j in a.pairs) == list(range(7))


def test_hungarian_errors():
    with pytest.raises(ValueError, match="at least as many"):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        hungarian(np.array([[np.nan]]))
    assert hungarian(np.zeros((3, 0))) == Assignment([], 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_constant_shift_keeps_assignment(seed, shift):
    c = np.random.default_rng(seed).uniform(0, 1, (7, 5))
    assert sorted(hungarian(c).pairs) == sorted(hungarian(c + shift).pairs)


def test_temporal_iou():
    assert temporal_iou((0.2, 0.5), (0.2, 0.5)) == 1.0
    assert temporal_iou((0.0, 0.2), (0.3, 0.5)) == 0.0
    assert temporal_iou((0.0, 0.5), (0.25, 0.75)) == pytest.approx(1 / 3, abs=1e-15)
    assert temporal_iou((0.3, 0.3), (0.3, 0.3)) == 1.0
    assert temporal_iou((0.3, 0.3), (0.2, 0.5)) == 0.0


def test_pair_cost_perfect():
    w = LossWeights()
    pred = EventProposal(0.1, 0.4, np.array([0.0, 1.0, 0.0, 0.0]))
    assert pair_cost(pred, EventAnnotation(0.1, 0.4, 1), w) == -w.cls


def test_pair_cost_disjoint_iou_term():
    w = LossWeights(cls=0.0, l1=0.0, iou=2.0)
    pred = EventProposal(0.0, 0.1, np.array([0.5, 0.5]))
    assert pair_cost(pred, EventAnnotation(0.5, 0.7, 0), w) == 2.0


def test_pair_cost_hand_sum_and_matrix():
    w = LossWeights()
    probs = np.array([0.2, 0.5, 0.1, 0.2])
    pred = EventProposal(0.15, 0.55, probs)
    gt = EventAnnotation(0.25, 0.65, 2)
    inter, union = 0.55 - 0.25, 0.65 - 0.15
    expect = 2.0 * -0.1 + 5.0 * (0.1 + 0.1) + 2.0 * (1 - inter / union)
    assert pair_cost(pred, gt, w) == pytest.approx(expect, abs=1e-12)
    cm = cost_matrix(probs[None], [[0.15, 0.55]], [2], [[0.25, 0.65]], w)
    assert cm.costs[0, 0] == pytest.approx(expect, abs=1e-12)


def test_anchor_cost_breaks_ties_towards_nearest_anchor():
    probs = np.full((2, 2), 0.5)
    boxes = [[0.2, 0.4], [0.2, 0.4]]  # identical proposals
    gt_boxes = [[0.2, 0.4]]
    anchors = [0.45, 0.32]
    plain = cost_matrix(probs, boxes, [0], gt_boxes, LossWeights(), anchors)
    assert "anchor_cost" not in plain.components  # off by default
    w = LossWeights(anchor=2.0)
    cm = cost_matrix(probs, boxes, [0], gt_boxes, w, anchors)
    np.testing.assert_allclose(cm.costs[:, 0] - plain.costs[:, 0], [2.0 * 0.15, 2.0 * 0.02])
    tgt = ClipTargets(np.array([0]), np.array(gt_boxes))
    (a,) = match_batch(probs[None], np.array([boxes]), [tgt], w, np.array([anchors]))
    assert a.pairs == [(1, 0)]


def _perfect_logits(labels_per_query, n_cls, big=60.0):
    logits = np.full((len(labels_per_query), n_cls), -big)
    logits[np.arange(len(labels_per_query)), labels_per_query] = big
    return logits


def test_loss_perfect_predictions_near_zero():
    boxes = np.array([[0.1, 0.3], [0.5, 0.9]])
    tgt = ClipTargets(np.array([1, 0]), boxes)
    logits = Tensor(_perfect_logits([1, 0], 4))
    asg = hungarian(cost_matrix(ad.softmax(logits).data, boxes, tgt.labels, tgt.boxes))
    loss = set_prediction_loss(logits, Tensor(boxes), [tgt], [asg])
    assert loss.data < 1e-12


def test_loss_empty_clip_is_weighted_no_event_ce():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((5, 4))
    tgt = ClipTargets(np.zeros(0, dtype=int), np.zeros((0, 2)))
    w = LossWeights()
    loss = set_prediction_loss(Tensor(logits), Tensor(rng.uniform(0, 1, (5, 2))), [tgt], [Assignment([], 0.0)], w)
    logp = logits - logits.max(1, keepdims=True)
    logp -= np.log(np.exp(logp).sum(1, keepdims=True))
    assert float(loss.data) == pytest.approx(w.no_event * np.mean(-logp[:, -1]), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    raw = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    tgt = ClipTargets(np.array([1]), np.array([[0.3, 0.6]]))

    def boxes():
        s = ad.sigmoid(raw)
        a, b = s[:, 0:1], s[:, 1:2]
        return ad.concat([ad.minimum(a, b), ad.maximum(a, b)], axis=1)

    asg = hungarian(cost_matrix(ad.softmax(logits).data, boxes().data, tgt.labels, tgt.boxes))
    f = lambda: set_prediction_loss(logits, boxes(), [tgt], [asg])  # noqa: E731
    assert check_gradients(f, [logits, raw]) < 1e-3


def test_loss_permutation_invariant():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((8, 4))
    boxes = np.sort(rng.uniform(0, 1, (8, 2)), axis=1)
    tgt = ClipTargets(np.array([0, 2, 1]), np.array([[0.1, 0.2], [0.3, 0.7], [0.75, 0.9]]))

    def loss_for(lg, bx):
        probs = ad.softmax(Tensor(lg)).data
        asg = match_batch(probs[None], bx[None], [tgt])
        return float(set_prediction_loss(Tensor(lg), Tensor(bx), [tgt], asg).data)

    base = loss_for(logits, boxes)
    for _ in range(5):
        perm = rng.permutation(8)
        assert loss_for(logits[perm], boxes[perm]) == pytest.approx(base, abs=1e-12)
