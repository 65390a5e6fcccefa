"""Qualitative renderings: coloured box outlines and blended label masks."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import BACKGROUND, IGNORE_LABEL, Box, SemanticMask

ORIGIN_COLORS = {
    "add": (255, 0, 255),
    "merge": (255, 255, 0),
    "split": (0, 255, 255),
    "leftover": (0, 255, 0),
}
DEFAULT_COLOR = (0, 0, 255)
OUTLINE = 2


def label_color(category: int) -> tuple[int, int, int]:
    """The usual bit-interleaved VOC palette."""
    r = g = b = 0
    c = int(category)
    for shift in range(7, -1, -1):
        r |= ((c >> 0) & 1) << shift
        g |= ((c >> 1) & 1) << shift
        b |= ((c >> 2) & 1) << shift
        c >>= 3
    return r, g, b


def blend_mask(image: np.ndarray, mask: SemanticMask, alpha: float = 0.5) -> np.ndarray:
    """Blend category colours over non-background, non-ignore pixels."""
    out = np.asarray(image, dtype=np.uint8).copy()
    if mask.shape != out.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {out.shape[:2]}")
    labels = mask.labels
    for cat in np.unique(labels):
        if cat in (BACKGROUND, IGNORE_LABEL):
            continue
        sel = labels == cat
        color = np.array(label_color(cat), dtype=np.float64)
        out[sel] = np.rint((1 - alpha) * out[sel] + alpha * color).astype(np.uint8)
    return out


def outline_pixels(box: Box, width: int, height: int, thickness: int = OUTLINE) -> np.ndarray:
    """Boolean map of the box border, ``thickness`` pixels drawn inward."""
    r0, r1, c0, c1 = box.pixel_span(width, height)
    sel = np.zeros((height, width), dtype=bool)
    if r1 <= r0 or c1 <= c0:
        return sel
    sel[r0:r1, c0:c1] = True
    inner = np.zeros_like(sel)
    inner[r0 + thickness:r1 - thickness, c0 + thickness:c1 - thickness] = True
    return sel & ~inner


def draw_boxes(image: np.ndarray, boxes: Sequence[tuple[Box, str | None]]) -> np.ndarray:
    out = np.asarray(image, dtype=np.uint8).copy()
    h, w = out.shape[:2]
    for box, origin in boxes:
        out[outline_pixels(box, w, h)] = ORIGIN_COLORS.get(origin, DEFAULT_COLOR)
    return out


def render(image: np.ndarray, boxes: Sequence[tuple[Box, str | None]] = (),
           mask: SemanticMask | None = None) -> np.ndarray:
    out = np.asarray(image, dtype=np.uint8)
    if out.ndim != 3 or out.shape[2] != 3:
        raise ValueError("overlay needs an RGB image")
    if mask is not None:
        out = blend_mask(out, mask)
    return draw_boxes(out, boxes)
