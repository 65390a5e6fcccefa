"""Detection AP, segmentation IOU and a TIDE-style error breakdown.

Detections and ground truth are keyed by image id:
``dets[image_id] = [ScoredBox, ...]`` and ``gts[image_id] = [(Box, category), ...]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import IGNORE_LABEL, Box, ScoredBox, SemanticMask, iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.arange(101) / 100  # exact k/100, unlike linspace
ERROR_TYPES = ("Cls", "Loc", "Both", "Dupe", "Bkg", "Miss")

Detections = Mapping[str, Sequence[ScoredBox]]
GroundTruth = Mapping[str, Sequence[tuple[Box, int]]]


@dataclass(frozen=True)
class _Match:
    image: str
    index: int  # position within the image's detection list
    category: int
    score: float
    gt: int  # matched ground-truth index in the image, -1 for a false positive


def _image_ids(dets: Detections, gts: GroundTruth) -> list[str]:
    return sorted(set(dets) | set(gts))


def _ranked(dets: Detections, ids: Sequence[str]):
    """Detections by descending score; ties keep input order."""
    flat = [(img, i, d) for img in ids for i, d in enumerate(dets.get(img, ()))]
    order = sorted(range(len(flat)), key=lambda k: -flat[k][2].scalar_score)
    return [flat[k] for k in order]


def match_detections(dets: Detections, gts: GroundTruth, iou_thresh: float):
    """Greedy score-ordered matching against same-class ground truth.

    Returns:
        ``(matches, used)`` where ``matches`` lists every detection in rank
        order and ``used[image]`` is the set of matched ground-truth indices.
    """
    ids = _image_ids(dets, gts)
    used: dict[str, set[int]] = {img: set() for img in ids}
    matches = []
    for img, i, det in _ranked(dets, ids):
        best, best_iou = -1, -1.0
        for g, (box, cat) in enumerate(gts.get(img, ())):
            if cat != det.category or g in used[img]:
                continue
            v = iou(det.box, box)
            if v > best_iou:
                best, best_iou = g, v
        if best >= 0 and best_iou >= iou_thresh:
            used[img].add(best)
        else:
            best = -1
        matches.append(_Match(img, i, det.category, det.scalar_score, best))
    return matches, used


def interpolated_ap(tp: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP of a ranked TP/FP sequence."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    pos = np.searchsorted(recall, RECALL_GRID, side="left")
    vals = np.where(pos < tp.size, envelope[np.minimum(pos, tp.size - 1)], 0.0)
    return float(vals.mean())


def _gt_counts(gts: GroundTruth) -> dict[int, int]:
    counts: dict[int, int] = {}
    for boxes in gts.values():
        for _, cat in boxes:
            counts[cat] = counts.get(cat, 0) + 1
    return counts


def average_precision(dets: Detections, gts: GroundTruth, iou_thresh: float) -> dict[int, float]:
    """Per-class AP; classes without ground truth are left out."""
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must lie in (0, 1)")
    matches, _ = match_detections(dets, gts, iou_thresh)
    return {cat: interpolated_ap([m.gt >= 0 for m in matches if m.category == cat], n)
            for cat, n in sorted(_gt_counts(gts).items())}


def class_mean(ap: Mapping[int, float]) -> float:
    return float(np.mean(list(ap.values()))) if ap else 0.0


@dataclass(frozen=True)
class MapResult:
    value: float
    per_threshold: dict[float, dict[int, float]]
    undefined: bool = False  # no ground truth at all; value reported as 0


def mean_ap(dets: Detections, gts: GroundTruth) -> MapResult:
    per = {t: average_precision(dets, gts, t) for t in IOU_THRESHOLDS}
    if not _gt_counts(gts):
        return MapResult(0.0, per, undefined=True)
    return MapResult(float(np.mean([class_mean(per[t]) for t in IOU_THRESHOLDS])), per)


def _confusion(preds: Sequence[SemanticMask], gts: Sequence[SemanticMask]) -> np.ndarray:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth masks")
    conf = np.zeros((256, 256), dtype=np.int64)
    for k, (p, g) in enumerate(zip(preds, gts)):
        if p.shape != g.shape:
            raise ValueError(f"mask pair {k}: shape {p.shape} vs {g.shape}")
        a, b = p.labels.ravel(), g.labels.ravel()
        keep = (a != IGNORE_LABEL) & (b != IGNORE_LABEL)
        conf += np.bincount(a[keep].astype(np.int64) * 256 + b[keep], minlength=256 * 256).reshape(256, 256)
    return conf


def per_class_iou(preds: Sequence[SemanticMask], gts: Sequence[SemanticMask]) -> dict[int, float]:
    """Dataset-level IOU per class with a non-empty union; pixels labelled
    ignore in either mask are skipped."""
    conf = _confusion(preds, gts)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    return {int(c): float(inter[c] / union[c]) for c in np.flatnonzero(union)}


def mean_iou(preds: Sequence[SemanticMask], gts: Sequence[SemanticMask]) -> float:
    per = per_class_iou(preds, gts)
    return float(np.mean(list(per.values()))) if per else 0.0


@dataclass(frozen=True)
class TideReport:
    deltas: dict[str, float]
    fp: int
    fn: int
    categories: dict[tuple[str, int], str] = field(default_factory=dict)  # FP (image, index) -> type
    baseline_ap: float = 0.0

    def counts(self) -> dict[str, int]:
        out = {t: 0 for t in ERROR_TYPES if t != "Miss"}
        for t in self.categories.values():
            out[t] += 1
        return out


def _classify(det: ScoredBox, img_gts, t_f, t_b):
    """Error type of a false positive and the ground-truth index it points at."""
    same = [(iou(det.box, b), g) for g, (b, c) in enumerate(img_gts) if c == det.category]
    other = [(iou(det.box, b), g) for g, (b, c) in enumerate(img_gts) if c != det.category]
    best_same = max(same, default=(0.0, -1))
    best_other = max(other, default=(0.0, -1))
    if t_b <= best_same[0] < t_f:
        return "Loc", best_same[1]
    if best_other[0] >= t_f:
        return "Cls", best_other[1]
    if best_same[0] >= t_f:
        return "Dupe", best_same[1]
    if max(best_same[0], best_other[0]) < t_b:
        return "Bkg", -1
    return "Both", best_other[1]


def tide_breakdown(dets: Detections, gts: GroundTruth, t_f: float = 0.5, t_b: float = 0.1) -> TideReport:
    """Classify false positives and score each error type by an oracle fix.

    Each delta is the class-mean AP at ``t_f`` after fixing every error of
    that type, minus the baseline.
    """
    if not 0 < t_b < t_f < 1:
        raise ValueError("thresholds must satisfy 0 < t_b < t_f < 1")
    matches, used = match_detections(dets, gts, t_f)
    baseline = class_mean(average_precision(dets, gts, t_f)) if _gt_counts(gts) else 0.0
    categories: dict[tuple[str, int], str] = {}
    targets: dict[tuple[str, int], int] = {}
    for m in matches:
        if m.gt < 0:
            kind, g = _classify(dets[m.image][m.index], gts.get(m.image, ()), t_f, t_b)
            categories[(m.image, m.index)] = kind
            targets[(m.image, m.index)] = g

    def fixed_dets(kind):
        out = {}
        for img, boxes in dets.items():
            kept = []
            for i, d in enumerate(boxes):
                if categories.get((img, i)) != kind:
                    kept.append(d)
                    continue
                g = targets[(img, i)]
                if kind in ("Cls", "Loc") and g not in used[img]:
                    gbox, gcat = gts[img][g]
                    if kind == "Cls":
                        kept.append(ScoredBox(d.box, gcat, _relabel(d.scores, gcat, d.scalar_score), d.scalar_score))
                    else:
                        kept.append(ScoredBox(gbox, d.category, d.scores, d.scalar_score))
                # other kinds, and fixes onto an already matched ground truth, drop the detection
            out[img] = kept
        return out

    def ap_of(d, g):
        return class_mean(average_precision(d, g, t_f)) if _gt_counts(g) else 0.0

    deltas = {kind: ap_of(fixed_dets(kind), gts) - baseline for kind in ERROR_TYPES if kind != "Miss"}
    implicated = {(img, targets[(img, i)]) for (img, i), k in categories.items() if k in ("Cls", "Loc")}
    missed_gts = {img: [gt for g, gt in enumerate(boxes)
                        if g in used.get(img, set()) or (img, g) in implicated]
                  for img, boxes in gts.items()}
    deltas["Miss"] = ap_of(dets, missed_gts) - baseline
    fn = sum(len(b) - len(used.get(img, ())) for img, b in gts.items())
    return TideReport({k: deltas[k] for k in ERROR_TYPES}, len(categories), fn, categories, baseline)


def _relabel(scores: tuple, category: int, score: float) -> tuple:
    """Score vector carrying ``score`` on ``category`` only."""
    n = max(len(scores), category)
    return tuple(score if j == category - 1 else 0.0 for j in range(n))


@dataclass(frozen=True)
class EvalReport:
    map: MapResult
    miou: float | None
    per_class_iou: dict[int, float] | None
    tide: TideReport

    def to_dict(self) -> dict:
        return {
            "mAP": self.map.value,
            "mAP_undefined": self.map.undefined,
            "AP": {f"{t:.2f}": {str(c): v for c, v in per.items()} for t, per in self.map.per_threshold.items()},
            "mIOU": self.miou,
            "IOU": None if self.per_class_iou is None else {str(c): v for c, v in self.per_class_iou.items()},
            "TIDE": {**self.tide.deltas, "FP": self.tide.fp, "FN": self.tide.fn},
        }


def evaluate(
    dets: Detections,
    gts: GroundTruth,
    pred_masks: Sequence[SemanticMask] = (),
    gt_masks: Sequence[SemanticMask] = (),
) -> EvalReport:
    ids_d = set(dets)
    ids_g = set(gts)
    if ids_d - ids_g:
        raise ValueError(f"predictions for unknown images: {sorted(ids_d - ids_g)}")
    miou = per = None
    if gt_masks or pred_masks:
        per = per_class_iou(pred_masks, gt_masks)
        miou = mean_iou(pred_masks, gt_masks)
    return EvalReport(mean_ap(dets, gts), miou, per, tide_breakdown(dets, gts))
