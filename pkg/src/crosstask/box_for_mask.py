"""Pseudo segmentation targets built from ground-truth boxes.

Two label maps are produced per image: the box-shaped mask, where each box
is filled with its category and smaller boxes win, and the coarse mask, where
an unsupervised segmenter decides which box pixels are foreground. Pixels that
no box covers are background in both.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .geometry import BACKGROUND, Box, SemanticMask
from .grabcut import grabcut

Annotation = tuple[Box, int]


class CoarseSegmenter(Protocol):
    def segment(self, image: np.ndarray, box: Box, seed: int) -> np.ndarray:
        """Boolean foreground map over ``box.pixel_span`` of ``image``."""
        ...


@dataclass(frozen=True)
class GrabCutSegmenter:
    iters: int = 5
    n_components: int = 5
    lambda_smooth: float = 50.0

    def segment(self, image, box, seed):
        return grabcut(image, box, iters=self.iters, n_components=self.n_components,
                       lambda_smooth=self.lambda_smooth, seed=seed)


class BoxFillSegmenter:
    """Marks the whole box as foreground; ignores the pixel values."""

    def segment(self, image, box, seed):
        r0, r1, c0, c1 = box.pixel_span(image.shape[1], image.shape[0])
        return np.ones((r1 - r0, c1 - c0), dtype=bool)


@dataclass(frozen=True)
class PseudoMaskPair:
    box_mask: SemanticMask
    coarse_mask: SemanticMask
    warnings: tuple[str, ...] = field(default=())


def clamped_area(box: Box, width: int, height: int) -> float:
    w = min(box.x_max, width) - max(box.x_min, 0.0)
    h = min(box.y_max, height) - max(box.y_min, 0.0)
    return max(w, 0.0) * max(h, 0.0)


def paint_order(boxes: Sequence[Annotation], width: int, height: int) -> list[int]:
    """Indices in painting order: larger clamped area first; on equal area the
    lower category is painted first so the higher one wins."""
    def key(i):
        box, cat = boxes[i]
        return (-clamped_area(box, width, height), cat, box.as_tuple())

    return sorted(range(len(boxes)), key=key)


def _check_categories(boxes):
    for i, (_, cat) in enumerate(boxes):
        if not 1 <= int(cat) <= 254:
            raise ValueError(f"box {i}: category must be in [1, 254], got {cat}")


def box_fill(boxes: Sequence[Annotation], width: int, height: int) -> SemanticMask:
    """Fill every box with its category, smaller boxes on top."""
    _check_categories(boxes)
    labels = np.zeros((height, width), dtype=np.uint8)
    for i in paint_order(boxes, width, height):
        box, cat = boxes[i]
        r0, r1, c0, c1 = box.pixel_span(width, height)
        labels[r0:r1, c0:c1] = cat
    return SemanticMask(labels)


def make_coarse_mask(
    image: np.ndarray | None,
    boxes: Sequence[Annotation],
    segmenter: CoarseSegmenter,
    seed: int,
    width: int | None = None,
    height: int | None = None,
    warnings: list[str] | None = None,
) -> SemanticMask:
    """Run ``segmenter`` per box and keep its foreground inside the boxes.

    Boxes are segmented in box-fill paint order. When the segmenter fails on
    a box, that box is filled entirely and a message goes to ``warnings``.

    Args:
        image: ``(H, W, 3)`` raster. ``None`` stands for a blank image, which
            suits segmenters that ignore pixel values.
        boxes: ground-truth ``(Box, category)`` pairs.
        segmenter: per-box binary segmenter.
        seed: passed unchanged to every segmenter call.
        width: mask width; required when ``image`` is ``None``.
        height: mask height; required when ``image`` is ``None``.
        warnings: optional list collecting fallback messages.
    """
    width, height = _resolve_size(image, width, height)
    _check_categories(boxes)
    if image is None:
        image = np.broadcast_to(np.zeros(3, np.uint8), (height, width, 3))
    labels = np.zeros((height, width), dtype=np.uint8)
    for i in paint_order(boxes, width, height):
        box, cat = boxes[i]
        r0, r1, c0, c1 = box.pixel_span(width, height)
        if r1 <= r0 or c1 <= c0:
            continue
        try:
            fg = np.asarray(segmenter.segment(image, box, seed), dtype=bool)
            if fg.shape != (r1 - r0, c1 - c0):
                raise ValueError(f"segmenter returned shape {fg.shape}, expected {(r1 - r0, c1 - c0)}")
        except Exception as exc:  # any segmenter failure degrades to a filled box
            if warnings is not None:
                warnings.append(f"box {i} {box.as_tuple()}: {exc}; filled whole box")
            fg = np.ones((r1 - r0, c1 - c0), dtype=bool)
        labels[r0:r1, c0:c1][fg] = cat
    labels[box_fill(boxes, width, height).labels == BACKGROUND] = BACKGROUND
    return SemanticMask(labels)


def make_pseudo_pair(
    image: np.ndarray | None,
    boxes: Sequence[Annotation],
    segmenter: CoarseSegmenter,
    seed: int,
    width: int | None = None,
    height: int | None = None,
) -> PseudoMaskPair:
    width, height = _resolve_size(image, width, height)
    warnings: list[str] = []
    box_mask = box_fill(boxes, width, height)
    coarse = make_coarse_mask(image, boxes, segmenter, seed, width, height, warnings)
    return PseudoMaskPair(box_mask, coarse, tuple(warnings))


def filter_violations(pair: PseudoMaskPair) -> int:
    """Pixels that are foreground in the coarse mask but background in the box mask."""
    return int(((pair.box_mask.labels == BACKGROUND) & (pair.coarse_mask.labels != BACKGROUND)).sum())


def _resolve_size(image, width, height):
    if image is not None:
        image = np.asarray(image)
        h, w = image.shape[:2]
        if (width is not None and width != w) or (height is not None and height != h):
            raise ValueError(f"image is {w}x{h}, expected {width}x{height}")
        return w, h
    if width is None or height is None:
        raise ValueError("width and height are required without an image")
    return int(width), int(height)
