"""Frame accuracy, segmental edit score, segmental F1@k and per-class accuracy.

Segment matching follows the usual action-segmentation protocol: every
predicted segment, in temporal order, claims the same-label ground-truth
segment with the highest IoU; it is a true positive when that IoU is
strictly above the threshold and the ground-truth segment is still
unclaimed, otherwise a false positive.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from edk.stages import StageSequence, StageVocabulary, segments_of

F1_THRESHOLDS = (10, 25, 50)


def _ids(x) -> np.ndarray:
    return np.asarray(x.labels if isinstance(x, StageSequence) else x, dtype=np.int64)


def frame_accuracy(pred, gt) -> float:
    p, g = _ids(pred), _ids(gt)
    if p.shape != g.shape:
        raise ValueError("pred and gt must have equal length")
    return 100.0 * int(np.count_nonzero(p == g)) / len(g)


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def edit_score(pred, gt) -> float:
    p = segments_of(_ids(pred)).stages
    g = segments_of(_ids(gt)).stages
    score = 100.0 * (1.0 - levenshtein(p, g) / max(len(p), len(g)))
    return max(score, 0.0)


def segment_counts(pred, gt, k: float) -> tuple[int, int, int]:
    """(tp, fp, fn) at IoU threshold ``k / 100``."""
    p_segs, g_segs = segments_of(_ids(pred)), segments_of(_ids(gt))
    if p_segs.T != g_segs.T:
        raise ValueError("pred and gt must have equal length")
    g_start = np.array([s.start for s in g_segs])
    g_end = np.array([s.end for s in g_segs])
    g_lab = np.array([s.stage for s in g_segs])
    thr = k / 100.0
    hits = np.zeros(len(g_segs), dtype=bool)
    tp = fp = 0
    for s in p_segs:
        inter = np.minimum(s.end, g_end) - np.maximum(s.start, g_start)
        union = np.maximum(s.end, g_end) - np.minimum(s.start, g_start)
        iou = np.where(g_lab == s.stage, np.clip(inter, 0, None) / union, 0.0)
        j = int(np.argmax(iou))
        if iou[j] > thr and not hits[j]:
            tp += 1
            hits[j] = True
        else:
            fp += 1
    return tp, fp, int(len(g_segs) - hits.sum())


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def f1_at(pred, gt, k: float) -> float:
    return f1_from_counts(*segment_counts(pred, gt, k))


def per_class_accuracy(pred, gt, vocab: StageVocabulary | None = None) -> dict:
    """Accuracy per stage present in ``gt``, keyed by stage name (or id without vocab)."""
    p, g = _ids(pred), _ids(gt)
    if p.shape != g.shape:
        raise ValueError("pred and gt must have equal length")
    out = {}
    for s in np.unique(g):
        sel = g == s
        key = vocab.names[s] if vocab is not None else int(s)
        out[key] = 100.0 * int(np.count_nonzero(p[sel] == s)) / int(sel.sum())
    return out


@dataclass
class MetricReport:
    acc: float
    edit: float
    f1_10: float
    f1_25: float
    f1_50: float
    per_class_acc: dict = field(default_factory=dict)

    @property
    def avg(self) -> float:
        return (self.acc + self.edit + self.f1_10 + self.f1_25 + self.f1_50) / 5.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["avg"] = self.avg
        return d


def sequence_report(pred, gt, vocab: StageVocabulary | None = None) -> MetricReport:
    return MetricReport(
        acc=frame_accuracy(pred, gt),
        edit=edit_score(pred, gt),
        f1_10=f1_at(pred, gt, 10),
        f1_25=f1_at(pred, gt, 25),
        f1_50=f1_at(pred, gt, 50),
        per_class_acc=per_class_accuracy(pred, gt, vocab),
    )


def _mean_reports(reports: Sequence[MetricReport]) -> MetricReport:
    keys = set().union(*(r.per_class_acc for r in reports))
    per_class = {}
    for k in keys:
        vals = [r.per_class_acc[k] for r in reports if k in r.per_class_acc]
        per_class[k] = float(np.mean(vals))
    return MetricReport(
        acc=float(np.mean([r.acc for r in reports])),
        edit=float(np.mean([r.edit for r in reports])),
        f1_10=float(np.mean([r.f1_10 for r in reports])),
        f1_25=float(np.mean([r.f1_25 for r in reports])),
        f1_50=float(np.mean([r.f1_50 for r in reports])),
        per_class_acc=per_class,
    )


def dataset_report(preds: Sequence, gts: Sequence, vocab: StageVocabulary | None = None,
                   aggregate: str = "per-seq") -> MetricReport:
    """Aggregate metrics over sequences.

    ``per-seq`` averages per-sequence metrics uniformly. ``pooled`` counts
    frames and segment matches over the whole set (edit is still averaged
    per sequence since it has no pooled form).
    """
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equally many (>0) predictions and ground truths")
    if aggregate == "per-seq":
        return _mean_reports([sequence_report(p, g, vocab) for p, g in zip(preds, gts)])
    if aggregate != "pooled":
        raise ValueError(f"unknown aggregate mode {aggregate!r}")
    p_all = np.concatenate([_ids(p) for p in preds])
    g_all = np.concatenate([_ids(g) for g in gts])
    f1 = {}
    for k in F1_THRESHOLDS:
        counts = np.sum([segment_counts(p, g, k) for p, g in zip(preds, gts)], axis=0)
        f1[k] = f1_from_counts(*counts)
    return MetricReport(
        acc=frame_accuracy(p_all, g_all),
        edit=float(np.mean([edit_score(p, g) for p, g in zip(preds, gts)])),
        f1_10=f1[10], f1_25=f1[25], f1_50=f1[50],
        per_class_acc=per_class_accuracy(p_all, g_all, vocab),
    )


def evaluate(model, fused: Sequence[np.ndarray], labels: Sequence, steps: Sequence[int],
             seeds: Sequence[int], aggregate: str = "per-seq", eta: float = 0.0,
             batch_size: int = 16) -> dict:
    """DDIM-decode every sequence for each step count and seed.

    Returns ``{"reports": {K: MetricReport}, "per_sequence": {K: [...]}}``.
    Each report averages the per-seed dataset metrics.
    """
    vocab = getattr(model, "vocab", None)
    gts = [_ids(l) for l in labels]
    reports, per_sequence = {}, {}
    for K in steps:
        seed_reports, per_seq = [], [[] for _ in gts]
        for seed in seeds:
            preds = model.predict(fused, K, seed=seed, eta=eta, batch_size=batch_size)
            seed_reports.append(dataset_report(preds, gts, vocab, aggregate))
            for i, (p, g) in enumerate(zip(preds, gts)):
                per_seq[i].append(sequence_report(p, g, vocab))
        reports[K] = _mean_reports(seed_reports)
        per_sequence[K] = [_mean_reports(r).to_dict() for r in per_seq]
    return {"reports": reports, "per_sequence": per_sequence}


def report_json(result: dict, config_digest: str) -> dict:
    return {
        "config_digest": config_digest,
        "reports": {str(k): r.to_dict() for k, r in result["reports"].items()},
        "per_sequence": {str(k): v for k, v in result["per_sequence"].items()},
    }


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()
