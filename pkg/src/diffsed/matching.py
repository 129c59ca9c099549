"""Bipartite matching between proposals and ground truth, and the set loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0  # matching cost on -prob[label]
    l1: float = 5.0
    iou: float = 2.0
    no_event: float = 0.1  # cross-entropy weight of unmatched proposals
    ce: float = 1.0  # cross-entropy coefficient in the loss
    anchor: float = 0.0  # matching cost on |anchor - event centre|, when anchors are given


@dataclass
class CostMatrix:
    costs: np.ndarray  # [N predictions, M ground truths]
    components: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    total_cost: float


def temporal_iou(a, b) -> float:
    (a0, a1), (b0, b1) = a, b
    la, lb = a1 - a0, b1 - b0
    if la <= 0 or lb <= 0:
        return 1.0 if (a0, a1) == (b0, b1) else 0.0
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    return inter / (la + lb - inter)


def _iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    p0, p1 = pred[:, 0:1], pred[:, 1:2]
    g0, g1 = gt[None, :, 0], gt[None, :, 1]
    inter = np.clip(np.minimum(p1, g1) - np.maximum(p0, g0), 0.0, None)
    union = (p1 - p0) + (g1 - g0) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return iou


def pair_cost(pred, gt, weights: LossWeights = LossWeights()) -> float:
    """Matching cost of one proposal against one normalized annotation."""
    prob = pred.class_probs[gt.label]
    l1 = abs(pred.onset - gt.onset) + abs(pred.offset - gt.offset)
    iou = temporal_iou((pred.onset, pred.offset), (gt.onset, gt.offset))
    return weights.cls * -prob + weights.l1 * l1 + weights.iou * (1.0 - iou)


def cost_matrix(probs, boxes, gt_labels, gt_boxes, weights: LossWeights = LossWeights(),
                anchors=None) -> CostMatrix:
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 2)
    gt_labels = np.asarray(gt_labels, dtype=np.intp)
    class_cost = -probs[:, gt_labels]
    l1_cost = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    iou_cost = 1.0 - _iou_matrix(boxes, gt_boxes)
    costs = weights.cls * class_cost + weights.l1 * l1_cost + weights.iou * iou_cost
    parts = {"class_cost": class_cost, "l1_cost": l1_cost, "iou_cost": iou_cost}
    if anchors is not None and weights.anchor:
        anchor_cost = np.abs(np.asarray(anchors, dtype=np.float64).reshape(-1, 1) - gt_boxes.mean(-1)[None, :])
        costs = costs + weights.anchor * anchor_cost
        parts["anchor_cost"] = anchor_cost
    return CostMatrix(costs, parts)


def _assign_rows(c: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Kuhn-Munkres for n rows <= m columns.

    Returns, for each row, its assigned column.
    """
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.intp)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def hungarian(costs) -> Assignment:
    """Minimum-cost matching of every ground truth (column) to a distinct prediction (row)."""
    c = costs.costs if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n_pred, n_gt = c.shape
    if n_pred < n_gt:
        raise ValueError(f"need at least as many predictions as ground truths ({n_pred} < {n_gt})")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    if n_gt == 0:
        return Assignment([], 0.0)
    pred_for_gt = _assign_rows(c.T)
    pairs = [(int(pred_for_gt[j]), j) for j in range(n_gt)]
    total = 0.0
    for i, j in pairs:
        total += c[i, j]
    return Assignment(pairs, float(total))


@dataclass
class ClipTargets:
    labels: np.ndarray  # [M] class indices
    boxes: np.ndarray  # [M, 2] normalized (onset, offset)


def set_prediction_loss(
    logits: Tensor,
    boxes: Tensor,
    targets: Sequence[ClipTargets],
    assignments: Sequence[Assignment],
    weights: LossWeights = LossWeights(),
) -> Tensor:
    """Batched set loss; the result is the mean of per-clip losses.

    ``logits`` is [B, N, K+1] (last slot = no event) and ``boxes`` is
    [B, N, 2]. Per clip: weighted cross-entropy averaged over N (unmatched
    proposals target the no-event slot with weight ``no_event``), plus L1 and
    1 - IoU averaged over the matched pairs.
    """
    if logits.ndim == 2:
        logits = ad.reshape(logits, (1,) + logits.shape)
        boxes = ad.reshape(boxes, (1,) + boxes.shape)
    B, N, C = logits.shape
    no_event = C - 1

    target = np.full((B, N), no_event, dtype=np.intp)
    ce_w = np.full((B, N), weights.no_event / (N * B))
    mb, mp, gt_rows, box_w = [], [], [], []
    for b, (tgt, asg) in enumerate(zip(targets, assignments)):
        m = len(asg.pairs)
        for i, j in asg.pairs:
            target[b, i] = tgt.labels[j]
            ce_w[b, i] = 1.0 / (N * B)
            mb.append(b)
            mp.append(i)
            gt_rows.append(np.asarray(tgt.boxes[j], dtype=np.float64))
            box_w.append(1.0 / (m * B))

    logp = ad.log_softmax(logits, axis=-1)
    bi, ni = np.indices((B, N))
    picked = ad.getitem(logp, (bi.ravel(), ni.ravel(), target.ravel()))
    loss = ad.tsum(picked * ce_w.ravel()) * -weights.ce

    if mb:
        pred = ad.getitem(boxes, (np.asarray(mb), np.asarray(mp)))
        gt = np.stack(gt_rows)
        w = np.asarray(box_w)
        l1 = ad.tsum(ad.absolute(pred - gt), axis=-1)
        p0, p1 = pred[:, 0], pred[:, 1]
        g0, g1 = gt[:, 0], gt[:, 1]
        inter = ad.relu(ad.minimum(p1, g1) - ad.maximum(p0, g0))
        union = (p1 - p0) + (g1 - g0) - inter
        iou = inter / union
        loss = loss + ad.tsum(l1 * w) * weights.l1 + ad.tsum((1.0 - iou) * w) * weights.iou
    return loss


def match_batch(probs: np.ndarray, boxes: np.ndarray, targets: Sequence[ClipTargets],
                weights: LossWeights = LossWeights(), anchors=None) -> list[Assignment]:
    out = []
    for b, tgt in enumerate(targets):
        cm = cost_matrix(probs[b], boxes[b], tgt.labels, tgt.boxes, weights,
                         None if anchors is None else anchors[b])
        out.append(hungarian(cm))
    return out
