"""Event-based, segment-based and tagging scores, plus clip classification metrics.

All detection scores are micro-averaged over the corpus. Times are seconds.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class Detection:
    onset: float
    offset: float
    label: int
    score: float = 1.0


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "Counts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def prf(self) -> tuple[float, float, float]:
        return prf(self.tp, self.fp, self.fn)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class EvalReport:
    event_f1: float = 0.0
    event_p: float = 0.0
    event_r: float = 0.0
    segment_f1: float = 0.0
    segment_p: float = 0.0
    segment_r: float = 0.0
    tagging_f1: float = 0.0
    per_class: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class ClsReport:
    top1: float
    top5: float
    mca: float
    map: float
    mauc: float


def _kept(preds, threshold):
    return [p for p in preds if p.score >= threshold]


def _event_counts_clip(preds, gts, collar, offset_ratio, threshold) -> dict[int, Counts]:
    preds = sorted(_kept(preds, threshold), key=lambda p: (p.onset, p.offset, p.label, p.score))
    gts = sorted(gts, key=lambda g: (g.onset, g.offset, g.label))
    used = [False] * len(preds)
    per: dict[int, Counts] = defaultdict(Counts)
    for g in gts:
        tol_off = max(collar, offset_ratio * (g.offset - g.onset))
        hit = False
        for i, p in enumerate(preds):
            if used[i] or p.label != g.label:
                continue
            if abs(p.onset - g.onset) <= collar and abs(p.offset - g.offset) <= tol_off:
                used[i] = hit = True
                break
        per[g.label].tp += hit
        per[g.label].fn += not hit
    for i, p in enumerate(preds):
        if not used[i]:
            per[p.label].fp += 1
    return per


def event_based_scores(preds_per_clip, gts_per_clip, collar: float = 0.2, offset_ratio: float = 0.2,
                       threshold: float = 0.5) -> dict:
    """Greedy onset-ordered matching with an onset collar and an offset tolerance
    of ``max(collar, offset_ratio * reference duration)``."""
    per_class: dict[int, Counts] = defaultdict(Counts)
    for preds, gts in zip(preds_per_clip, gts_per_clip, strict=True):
        for k, c in _event_counts_clip(preds, gts, collar, offset_ratio, threshold).items():
            per_class[k].add(c)
    return _summarize(per_class)


def _segment_span(on: float, off: float, L: float, n_seg: int) -> range:
    first = int(math.floor(on / L))
    last = min(int(math.ceil(off / L)) - 1, n_seg - 1)
    return range(max(first, 0), last + 1)


def _activity(events, L: float, n_seg: int) -> set[tuple[int, int]]:
    cells = set()
    for e in events:
        if e.offset > e.onset:
            cells.update((e.label, s) for s in _segment_span(e.onset, e.offset, L, n_seg))
    return cells


def segment_based_scores(preds_per_clip, gts_per_clip, durations: Sequence[float],
                         segment_length: float = 1.0, threshold: float = 0.5) -> dict:
    per_class: dict[int, Counts] = defaultdict(Counts)
    for preds, gts, dur in zip(preds_per_clip, gts_per_clip, durations, strict=True):
        n_seg = max(1, int(math.ceil(dur / segment_length - 1e-9)))
        ref = _activity(gts, segment_length, n_seg)
        est = _activity(_kept(preds, threshold), segment_length, n_seg)
        for k, _ in ref & est:
            per_class[k].tp += 1
        for k, _ in est - ref:
            per_class[k].fp += 1
        for k, _ in ref - est:
            per_class[k].fn += 1
    return _summarize(per_class)


def tagging_scores(preds_per_clip, gts_per_clip, threshold: float = 0.5) -> dict:
    per_class: dict[int, Counts] = defaultdict(Counts)
    for preds, gts in zip(preds_per_clip, gts_per_clip, strict=True):
        ref = {g.label for g in gts}
        est = {p.label for p in _kept(preds, threshold)}
        for k in ref & est:
            per_class[k].tp += 1
        for k in est - ref:
            per_class[k].fp += 1
        for k in ref - est:
            per_class[k].fn += 1
    out = _summarize(per_class)
    if out["tp"] + out["fp"] + out["fn"] == 0:
        out.update(precision=1.0, recall=1.0, f1=1.0)
    return out


def tagging_f1(preds_per_clip, gts_per_clip, threshold: float = 0.5) -> float:
    return tagging_scores(preds_per_clip, gts_per_clip, threshold)["f1"]


def _summarize(per_class: dict[int, Counts]) -> dict:
    total = Counts()
    for c in per_class.values():
        total.add(c)
    p, r, f = total.prf()
    classes = {}
    for k in sorted(per_class):
        cp, cr, cf = per_class[k].prf()
        classes[str(k)] = {"precision": cp, "recall": cr, "f1": cf, **asdict(per_class[k])}
    return {"precision": p, "recall": r, "f1": f, **asdict(total), "per_class": classes}


def evaluate(preds_per_clip, gts_per_clip, durations, collar: float = 0.2, offset_ratio: float = 0.2,
             segment_length: float = 1.0, threshold: float = 0.5) -> EvalReport:
    ev = event_based_scores(preds_per_clip, gts_per_clip, collar, offset_ratio, threshold)
    seg = segment_based_scores(preds_per_clip, gts_per_clip, durations, segment_length, threshold)
    tag = tagging_scores(preds_per_clip, gts_per_clip, threshold)
    return EvalReport(
        event_f1=ev["f1"], event_p=ev["precision"], event_r=ev["recall"],
        segment_f1=seg["f1"], segment_p=seg["precision"], segment_r=seg["recall"],
        tagging_f1=tag["f1"],
        per_class={"event": ev["per_class"], "segment": seg["per_class"], "tagging": tag["per_class"]},
        params={"collar": collar, "offset_ratio": offset_ratio, "segment_length": segment_length,
                "threshold": threshold, "n_clips": len(durations)},
    )


# ------------------------------------------------------ clip classification


def average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    """All-points AP: sum over distinct thresholds of (R_n - R_{n-1}) * P_n."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order].astype(float)
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie group
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney rank statistic with average ranks for ties."""
    ranks = rankdata(scores)
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_scores(clip_logits, clip_labels) -> ClsReport:
    scores = np.asarray(clip_logits.data if hasattr(clip_logits, "data") else clip_logits, dtype=np.float64)
    labels = np.asarray(clip_labels, dtype=np.intp)
    n, K = scores.shape
    if n < 1:
        raise ValueError("need at least one clip")
    true = scores[np.arange(n), labels]
    rank = (scores > true[:, None]).sum(axis=1)
    top1 = float(np.mean(rank < 1))
    top5 = float(np.mean(rank < 5))
    pred = np.argmax(scores, axis=1)
    accs, aps, aucs = [], [], []
    for k in range(K):
        pos = labels == k
        if not pos.any():
            continue
        accs.append(float(np.mean(pred[pos] == k)))
        aps.append(average_precision(scores[:, k], pos))
        if not pos.all():
            aucs.append(roc_auc(scores[:, k], pos))
    return ClsReport(top1, top5, float(np.mean(accs)), float(np.mean(aps)),
                     float(np.mean(aucs)) if aucs else float("nan"))


# ----------------------------------------------------------------- file IO


def write_predictions(path, rows: Sequence[dict]):
    """JSON-lines rows of {clip_id, onset, offset, label, score}."""
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps({k: r[k] for k in ("clip_id", "onset", "offset", "label", "score")}) + "\n")


def read_predictions(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = defaultdict(list)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            out[r["clip_id"]].append(Detection(float(r["onset"]), float(r["offset"]), int(r["label"]),
                                               float(r.get("score", 1.0))))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}:{lineno}: bad prediction row: {e}") from None
    return dict(out)
