"""Timing harness for box refinement and GrabCut.

Run ``python -m crosstask.bench`` to print median wall-clock times.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from .geometry import Box, ScoredBox, SemanticMask, connected_components
from .grabcut import grabcut
from .mask_for_box import refine_from_mask


def refine_fixture(seed: int = 0, width: int = 640, height: int = 480, n_predictions: int = 50,
                   num_classes: int = 3):
    """A mask of overlapping rectangles and detections scattered around its components."""
    rng = np.random.default_rng(seed)
    labels = np.zeros((height, width), np.uint8)
    for _ in range(12):
        c = int(rng.integers(1, num_classes + 1))
        w, h = (int(v) for v in rng.integers(30, 200, 2))
        x, y = int(rng.integers(0, width - w)), int(rng.integers(0, height - h))
        labels[y:y + h, x:x + w] = c
    mask = SemanticMask(labels)
    comps = connected_components(mask)
    preds = []
    for _ in range(n_predictions):
        b = comps[int(rng.integers(len(comps)))].bounds
        jit = rng.normal(0, 0.15, 4) * np.array([b.width, b.height, b.width, b.height])
        x0, y0, x1, y1 = np.array(b.as_tuple()) + jit
        x0, x1 = sorted((float(np.clip(x0, 0, width)), float(np.clip(x1, 0, width))))
        y0, y1 = sorted((float(np.clip(y0, 0, height)), float(np.clip(y1, 0, height))))
        if x1 - x0 < 1 or y1 - y0 < 1:
            x0, y0, x1, y1 = b.as_tuple()
        scores = np.round(rng.random(num_classes), 2)
        preds.append(ScoredBox(Box(x0, y0, x1, y1), int(np.argmax(scores)) + 1, tuple(scores), float(scores.max())))
    return mask, preds


def grabcut_fixture(seed: int = 0, width: int = 400, height: int = 300):
    """Noisy image with a textured object; the box spans 320x240 pixels."""
    rng = np.random.default_rng(seed)
    img = rng.normal(90, 35, (height, width, 3))
    img[60:240, 80:320] = rng.normal((200, 40, 50), 25, (180, 240, 3))
    return np.clip(img, 0, 255).astype(np.uint8), Box(40, 30, 360, 270)


def median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_refine(repeats: int = 21) -> float:
    mask, preds = refine_fixture()
    refine_from_mask(mask, preds)  # warm-up
    return median_time(lambda: refine_from_mask(mask, preds), repeats)


def bench_grabcut(repeats: int = 3) -> float:
    img, box = grabcut_fixture()
    grabcut(img[:40, :40], Box(5, 5, 30, 30))  # compile the flow solver outside the timing
    return median_time(lambda: grabcut(img, box), repeats)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="median timings")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)
    r = bench_refine(max(args.repeats, 5))
    g = bench_grabcut(args.repeats)
    print(f"refine  640x480, 50 predictions: {r * 1000:8.2f} ms (limit 50 ms)")
    print(f"grabcut 320x240 box, K=5, 5 it:  {g:8.3f} s  (limit 5 s)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
