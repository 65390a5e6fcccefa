"""Mask-for-Box: refine mask-derived reference boxes with predicted boxes.

Reference boxes are the circumscribed rectangles of the connected components
of a ground-truth semantic mask. They carry the right category but may cover
several instances (split), only part of one (merge), or be fine as they are
(add / leftover). Predicted boxes from the detector supply the instance cue.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (
    Box,
    ScoredBox,
    SemanticMask,
    boxes_to_array,
    connected_components,
    iou_matrix,
)

log = logging.getLogger(__name__)


class Origin(str, enum.Enum):
    SPLIT = "split"
    MERGE = "merge"
    ADD = "add"
    LEFTOVER = "leftover"


ORIGIN_RANK = {Origin.SPLIT: 0, Origin.MERGE: 1, Origin.ADD: 2, Origin.LEFTOVER: 3}


@dataclass(frozen=True)
class RefinementParams:
    split_conf: float = 0.4
    split_iou: float = 0.6
    split_bonus: float = 0.1
    merge_conf: float = 0.1
    merge_bonus: float = 0.4
    conf_cap: float = 0.9
    add_conf: float = 0.5
    add_iou: float = 0.8
    nms_iou: float = 0.4
    touch_tol: float = 0.1
    max_powerset_members: int = 16

    def __post_init__(self):
        for name in (
            "split_conf", "split_iou", "split_bonus", "merge_conf", "merge_bonus",
            "conf_cap", "add_conf", "add_iou", "nms_iou", "touch_tol",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} must lie in [0, 1]")
        if self.max_powerset_members < 2:
            raise ValueError("max_powerset_members must be >= 2")


@dataclass(frozen=True)
class RefinedBox:
    box: Box
    category: int
    confidence: float
    origin: Origin
    # refined boxes train the localization branch only by default
    train_classification: bool = field(default=False)


Reference = tuple[Box, int]


def extract_reference_boxes(mask: SemanticMask) -> list[Reference]:
    """Circumscribed rectangle of every connected component, with its category."""
    return [(c.bounds, c.category) for c in connected_components(mask)]


def prediction_sort_key(p: ScoredBox) -> tuple:
    return (p.box.as_tuple(), p.scores, p.scalar_score, p.category)


def _touch_sides(refs: np.ndarray, preds: np.ndarray, tol: float) -> np.ndarray:
    """Boolean ``(N, M, 4)`` array of touching sides in xyxy order."""
    iw = np.minimum(refs[:, None, 2], preds[None, :, 2]) - np.maximum(refs[:, None, 0], preds[None, :, 0])
    ih = np.minimum(refs[:, None, 3], preds[None, :, 3]) - np.maximum(refs[:, None, 1], preds[None, :, 1])
    tx = tol * (refs[:, 2] - refs[:, 0])
    ty = tol * (refs[:, 3] - refs[:, 1])
    tols = np.stack([tx, ty, tx, ty], axis=1)[:, None, :]
    sides = np.abs(refs[:, None, :] - preds[None, :, :]) <= tols
    sides &= ((iw > 0) & (ih > 0))[:, :, None]
    return sides


def _powerset_candidates(ref_arr: np.ndarray, members: list[int]):
    """Unique merged rectangles of all subsets with at least two members.

    Each rectangle is attributed to the largest subset producing it. Returns
    ``(hulls, subset_bits)`` where ``subset_bits[c]`` flags members of ``c``.
    """
    n = len(members)
    codes = np.arange(1, 1 << n, dtype=np.int64)
    bits = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    sizes = bits.sum(axis=1)
    bits, sizes = bits[sizes >= 2], sizes[sizes >= 2]
    sub = ref_arr[members]
    hulls = np.stack(
        [
            np.where(bits, sub[:, 0], np.inf).min(axis=1),
            np.where(bits, sub[:, 1], np.inf).min(axis=1),
            np.where(bits, sub[:, 2], -np.inf).max(axis=1),
            np.where(bits, sub[:, 3], -np.inf).max(axis=1),
        ],
        axis=1,
    )
    _, inverse = np.unique(hulls, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    best = np.lexsort((-sizes, inverse))
    group_start = np.r_[True, inverse[best][1:] != inverse[best][:-1]]
    chosen = best[group_start]
    return hulls[chosen], bits[chosen]


class _Refiner:
    def __init__(self, references: Sequence[Reference], predictions: Sequence[ScoredBox],
                 params: RefinementParams):
        self.params = params
        self.refs = list(references)
        self.preds = sorted(predictions, key=prediction_sort_key)
        n_c = min((len(p.scores) for p in self.preds), default=None)
        for box, cat in self.refs:
            if cat < 1:
                raise ValueError("reference category must be >= 1")
            if n_c is not None and cat > n_c:
                raise ValueError(f"reference category {cat} exceeds prediction score length {n_c}")
        self.ref_arr = boxes_to_array(b for b, _ in self.refs)
        self.pred_arr = boxes_to_array(p.box for p in self.preds)
        if self.preds:
            self.scores = np.array([p.scores[:n_c] for p in self.preds], dtype=np.float64)
        else:
            self.scores = np.zeros((0, 0))
        self.ious = iou_matrix(self.ref_arr, self.pred_arr)
        self.sides = _touch_sides(self.ref_arr, self.pred_arr, params.touch_tol)
        self.n_touch = self.sides.sum(axis=2)
        self.leftover = np.ones(len(self.refs), dtype=bool)
        # entries: (xyxy tuple, category, confidence, origin)
        self.shortlist: list[tuple] = []

    def _crop(self, i: int, k: int):
        coords = np.where(self.sides[i, k], self.ref_arr[i], self.pred_arr[k])
        if not (coords[0] < coords[2] and coords[1] < coords[3]):
            return None
        return tuple(float(c) for c in coords)

    def split(self):
        p = self.params
        for i, (ref, j) in enumerate(self.refs):
            if not self.preds:
                break
            s = self.scores[:, j - 1]
            for k in np.flatnonzero(s > p.split_conf):
                if self.ious[i, k] <= p.split_iou:
                    if self.n_touch[i, k] < 2:
                        continue
                    cand = self._crop(i, k)
                    if cand is None:
                        continue
                else:
                    cand = ref.as_tuple()
                conf = min(p.conf_cap, float(s[k]) + p.split_bonus)
                self.shortlist.append((cand, j, conf, Origin.SPLIT))
                self.leftover[i] = False

    def _best_match(self, hulls: np.ndarray):
        ious = iou_matrix(hulls, self.pred_arr)
        arg = ious.argmax(axis=1)
        return ious[np.arange(len(hulls)), arg], arg

    def merge(self):
        if not self.preds:
            return
        cats = sorted({self.refs[i][1] for i in np.flatnonzero(self.leftover)})
        for j in cats:
            members = [i for i in np.flatnonzero(self.leftover) if self.refs[i][1] == j]
            if len(members) < 2:
                continue
            if len(members) > self.params.max_powerset_members:
                log.info("class %d has %d leftover fragments; using greedy pairwise merging",
                         j, len(members))
                self._merge_greedy(j, members)
            else:
                self._merge_powerset(j, members)

    def _merge_powerset(self, j: int, members: list[int]):
        p = self.params
        hulls, bits = _powerset_candidates(self.ref_arr, members)
        best, arg = self._best_match(hulls)
        score = self.scores[arg, j - 1]
        sizes = bits.sum(axis=1)
        order = np.lexsort((hulls[:, 3], hulls[:, 2], hulls[:, 1], hulls[:, 0], -sizes, -best))
        members = np.asarray(members)
        for c in order:
            if not (best[c] > 0 and score[c] > p.merge_conf):
                continue
            subset = members[bits[c]]
            if not self.leftover[subset].all():
                continue
            conf = min(p.conf_cap, float(score[c]) + p.merge_bonus)
            self.shortlist.append((tuple(float(v) for v in hulls[c]), j, conf, Origin.MERGE))
            self.leftover[subset] = False

    def _merge_greedy(self, j: int, members: list[int]):
        p = self.params
        clusters = [(self.ref_arr[i].copy(), [i]) for i in members]
        final_conf = {}
        while len(clusters) > 1:
            pairs = [(a, b) for a in range(len(clusters)) for b in range(a + 1, len(clusters))]
            hulls = np.array([
                np.r_[np.minimum(clusters[a][0][:2], clusters[b][0][:2]),
                      np.maximum(clusters[a][0][2:], clusters[b][0][2:])]
                for a, b in pairs
            ])
            best, arg = self._best_match(hulls)
            order = np.lexsort((hulls[:, 3], hulls[:, 2], hulls[:, 1], hulls[:, 0], -best))
            c = order[0]
            score = self.scores[arg[c], j - 1]
            if not (best[c] > 0 and score > p.merge_conf):
                break
            a, b = pairs[c]
            merged = (hulls[c], clusters[a][1] + clusters[b][1])
            clusters = [cl for n, cl in enumerate(clusters) if n not in (a, b)] + [merged]
            final_conf[tuple(merged[1])] = float(score)
        for hull, subset in clusters:
            if len(subset) < 2:
                continue
            conf = min(p.conf_cap, final_conf[tuple(subset)] + p.merge_bonus)
            self.shortlist.append((tuple(float(v) for v in hull), j, conf, Origin.MERGE))
            self.leftover[subset] = False

    def add(self):
        p = self.params
        for i, (ref, j) in enumerate(self.refs):
            if not self.preds:
                break
            s = self.scores[:, j - 1]
            for k in np.flatnonzero(s > p.add_conf):
                if self.ious[i, k] >= p.add_iou:
                    cand = ref.as_tuple()
                elif self.n_touch[i, k] >= 2:
                    cand = self._crop(i, k)
                    if cand is None:
                        continue
                else:
                    continue
                self.shortlist.append((cand, j, float(s[k]), Origin.ADD))

    def suppress(self) -> list[RefinedBox]:
        thr = self.params.nms_iou
        entries = sorted(
            self.shortlist, key=lambda e: (-e[2], *e[0], e[1], ORIGIN_RANK[e[3]])
        )
        kept_by_class: dict[int, list] = {}
        out = []
        for coords, j, conf, origin in entries:
            kept = kept_by_class.setdefault(j, [])
            if kept and (iou_matrix(np.array(coords), np.array(kept)) > thr).any():
                continue
            kept.append(coords)
            out.append(RefinedBox(Box(*coords), j, conf, origin))
        return out

    def run(self) -> list[RefinedBox]:
        self.split()
        self.merge()
        self.add()
        refined = self.suppress()
        refined.extend(
            RefinedBox(ref, j, 1.0, Origin.LEFTOVER)
            for (ref, j), left in zip(self.refs, self.leftover)
            if left
        )
        return refined


def refine(
    references: Sequence[Reference],
    predictions: Sequence[ScoredBox],
    params: RefinementParams | None = None,
) -> list[RefinedBox]:
    """Split, merge and add reference boxes using predicted boxes.

    The phases run in a fixed order: splitting, merging of unmatched
    fragments, adding of well-predicted boxes, then per-class NMS of the
    shortlist. References consumed by neither splitting nor merging are
    appended unchanged with confidence 1.0.

    Args:
        references: ``(box, category)`` pairs, typically from
            :func:`extract_reference_boxes`.
        predictions: detections with full per-class score vectors.
        params: thresholds; defaults to :class:`RefinementParams`.

    Returns:
        Refined boxes: NMS survivors by descending confidence, then leftovers
        in reference order.
    """
    return _Refiner(references, predictions, params or RefinementParams()).run()


def refine_from_mask(
    mask: SemanticMask,
    predictions: Sequence[ScoredBox],
    params: RefinementParams | None = None,
) -> list[RefinedBox]:
    return refine(extract_reference_boxes(mask), predictions, params)


def origin_counts(refined: Sequence[RefinedBox]) -> dict[str, int]:
    counts = {o.value: 0 for o in Origin}
    for r in refined:
        counts[r.origin.value] += 1
    return counts
