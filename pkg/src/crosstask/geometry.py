"""Axis-aligned box algebra, semantic masks and connected components.

Boxes use a half-open pixel convention: a box ``(x_min, y_min, x_max, y_max)``
covers the pixels with integer coordinates ``p`` such that
``x_min <= p.x < x_max`` and ``y_min <= p.y < y_max``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

IGNORE_LABEL = 255
BACKGROUND = 0

SIDES = ("left", "top", "right", "bottom")


class CandidateRejected(ValueError):
    """A derived box would have non-positive extent."""


@dataclass(frozen=True, order=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        for name, value in zip(("x_min", "y_min", "x_max", "y_max"), coords):
            object.__setattr__(self, name, float(value))
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"box must have positive area: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def side(self, name: str) -> float:
        return getattr(self, _SIDE_ATTR[name])

    def pixel_span(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Row/column index ranges ``(r0, r1, c0, c1)`` covered inside an image.

        The ranges are clamped to the image and may be empty.
        """
        c0 = min(max(math.ceil(self.x_min), 0), width)
        c1 = min(max(math.ceil(self.x_max), 0), width)
        r0 = min(max(math.ceil(self.y_min), 0), height)
        r1 = min(max(math.ceil(self.y_max), 0), height)
        return r0, r1, c0, c1


_SIDE_ATTR = {"left": "x_min", "top": "y_min", "right": "x_max", "bottom": "y_max"}


@dataclass(frozen=True)
class ScoredBox:
    """A detection: box, predicted category and per-class sigmoid scores.

    ``scores[j - 1]`` is the confidence for category ``j``.
    """

    box: Box
    category: int
    scores: tuple[float, ...]
    scalar_score: float

    def __post_init__(self):
        if self.category < 1:
            raise ValueError("category must be >= 1 (0 is background)")
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        for s in (*self.scores, self.scalar_score):
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"score {s} outside [0, 1]")

    @classmethod
    def single(cls, box: Box, category: int, score: float, num_classes: int) -> "ScoredBox":
        """Detection whose score vector is zero except at its own category."""
        scores = [0.0] * num_classes
        scores[category - 1] = score
        return cls(box, category, tuple(scores), score)

    def score_for(self, category: int) -> float:
        return self.scores[category - 1]


class SemanticMask:
    """H x W map of category labels; 0 is background and 255 is ignore."""

    __slots__ = ("labels", "num_classes")

    def __init__(self, labels, num_classes: int | None = None):
        arr = np.asarray(labels)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > IGNORE_LABEL):
            raise ValueError("mask labels must lie in [0, 255]")
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        if num_classes is not None:
            bad = (arr > num_classes) & (arr != IGNORE_LABEL)
            if bad.any():
                r, c = np.argwhere(bad)[0]
                raise ValueError(
                    f"label {arr[r, c]} at (x={c}, y={r}) exceeds num_classes={num_classes}"
                )
        arr.setflags(write=False)
        self.labels = arr
        self.num_classes = num_classes

    @classmethod
    def zeros(cls, width: int, height: int) -> "SemanticMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def categories(self) -> list[int]:
        vals = np.unique(self.labels)
        return [int(v) for v in vals if v not in (BACKGROUND, IGNORE_LABEL)]

    def __eq__(self, other):
        if not isinstance(other, SemanticMask):
            return NotImplemented
        return self.labels.shape == other.labels.shape and bool(np.array_equal(self.labels, other.labels))

    def __hash__(self):
        return hash((self.labels.shape, self.labels.tobytes()))

    def __repr__(self):
        return f"SemanticMask({self.width}x{self.height}, categories={self.categories()})"


@dataclass(frozen=True)
class Component:
    category: int
    pixel_count: int
    bounds: Box


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU between ``(N, 4)`` and ``(M, 4)`` xyxy arrays.

    Uses the same operation order as :func:`iou`, so results agree bit for bit.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    inter = iw * ih
    valid = (iw > 0) & (ih > 0)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros(inter.shape)
    np.divide(inter, union, out=out, where=valid)
    return out


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def connected_components(mask: SemanticMask) -> list[Component]:
    """8-connected components of every foreground category.

    Components are ordered by category, then by the raster position of their
    first pixel.
    """
    structure = np.ones((3, 3), dtype=bool)
    out = []
    for cat in mask.categories():
        labeled, n = ndimage.label(mask.labels == cat, structure=structure)
        if n == 0:
            continue
        counts = np.bincount(labeled.ravel(), minlength=n + 1)
        # ndimage numbers components in raster order of their first pixel
        for idx, sl in enumerate(ndimage.find_objects(labeled), start=1):
            rows, cols = sl
            bounds = Box(cols.start, rows.start, cols.stop, rows.stop)
            out.append(Component(cat, int(counts[idx]), bounds))
    return out


def union_box(boxes: Iterable[Box]) -> Box:
    boxes = list(boxes)
    if not boxes:
        raise ValueError("union of no boxes")
    return Box(
        min(b.x_min for b in boxes),
        min(b.y_min for b in boxes),
        max(b.x_max for b in boxes),
        max(b.y_max for b in boxes),
    )


def nms_order_key(box: Box, score: float, category: int) -> tuple:
    return (-score, box.x_min, box.y_min, box.x_max, box.y_max, category)


def nms(boxes: Sequence[ScoredBox], threshold: float) -> list[ScoredBox]:
    """Greedy per-class non-maximum suppression.

    Within a category a box survives iff its IOU with every kept box is at
    most ``threshold``. Survivors are returned by descending ``scalar_score``.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    ordered = sorted(
        boxes, key=lambda d: (*nms_order_key(d.box, d.scalar_score, d.category), d.scores)
    )
    kept: list[ScoredBox] = []
    by_class: dict[int, list[Box]] = {}
    for det in ordered:
        same = by_class.setdefault(det.category, [])
        if all(iou(det.box, k) <= threshold for k in same):
            same.append(det.box)
            kept.append(det)
    return kept


def touch(reference: Box, predicted: Box, tol: float = 0.1) -> frozenset[str]:
    """Sides of ``reference`` that ``predicted`` lies within tolerance of.

    Left/right sides compare against ``tol * reference.width``, top/bottom
    against ``tol * reference.height``. Non-intersecting pairs touch nowhere.
    """
    iw = min(reference.x_max, predicted.x_max) - max(reference.x_min, predicted.x_min)
    ih = min(reference.y_max, predicted.y_max) - max(reference.y_min, predicted.y_min)
    if iw <= 0 or ih <= 0:
        return frozenset()
    tx = tol * (reference.x_max - reference.x_min)
    ty = tol * (reference.y_max - reference.y_min)
    sides = []
    if abs(reference.x_min - predicted.x_min) <= tx:
        sides.append("left")
    if abs(reference.y_min - predicted.y_min) <= ty:
        sides.append("top")
    if abs(reference.x_max - predicted.x_max) <= tx:
        sides.append("right")
    if abs(reference.y_max - predicted.y_max) <= ty:
        sides.append("bottom")
    return frozenset(sides)


def touches(reference: Box, predicted: Box, tol: float = 0.1) -> bool:
    return len(touch(reference, predicted, tol)) >= 2


def crop(reference: Box, predicted: Box, tol: float = 0.1) -> Box:
    """Take touching sides from ``reference`` and the rest from ``predicted``.

    Raises:
        ValueError: if the pair does not touch on at least two sides.
        CandidateRejected: if the combined box is degenerate.
    """
    sides = touch(reference, predicted, tol)
    if len(sides) < 2:
        raise ValueError("crop requires the predicted box to touch >= 2 reference sides")
    coords = [
        (reference if side in sides else predicted).side(side) for side in SIDES
    ]
    if not (coords[0] < coords[2] and coords[1] < coords[3]):
        raise CandidateRejected(f"degenerate crop {coords}")
    return Box(*coords)
