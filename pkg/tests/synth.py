"""Seeded synthetic masks, detections and images shared by the test modules."""

import numpy as np

from crosstask.geometry import Box, ScoredBox, SemanticMask, connected_components


def random_mask(rng, max_side=128, num_classes=3, max_components=6):
    """Random rectangles painted per class; retried until each class has
    at most ``max_components`` components."""
    while True:
        h = int(rng.integers(16, max_side + 1))
        w = int(rng.integers(16, max_side + 1))
        labels = np.zeros((h, w), dtype=np.uint8)
        for _ in range(int(rng.integers(0, 9))):
            cat = int(rng.integers(1, num_classes + 1))
            bw, bh = int(rng.integers(2, max(3, w // 2))), int(rng.integers(2, max(3, h // 2)))
            x, y = int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1))
            labels[y:y + bh, x:x + bw] = cat
        if rng.random() < 0.1:
            labels[rng.random((h, w)) < 0.02] = 255
        mask = SemanticMask(labels)
        comps = connected_components(mask)
        per_class = [sum(c.category == k for c in comps) for k in range(1, num_classes + 1)]
        if max(per_class) <= max_components:
            return mask


def _jitter(rng, box, w, h, scale):
    coords = np.array(box.as_tuple()) + rng.normal(0, scale, 4) * np.array(
        [box.width, box.height, box.width, box.height])
    if rng.random() < 0.5:
        coords = np.round(coords)
    x0, y0, x1, y1 = coords
    x0, x1 = sorted((float(np.clip(x0, 0, w)), float(np.clip(x1, 0, w))))
    y0, y1 = sorted((float(np.clip(y0, 0, h)), float(np.clip(y1, 0, h))))
    if x1 - x0 < 1 or y1 - y0 < 1:
        return None
    return Box(x0, y0, x1, y1)


def random_predictions(rng, mask, num_classes=3, max_preds=30):
    """Detections derived from the mask's components: near-copies, halves
    (split cases), unions of neighbours (merge cases) and clutter."""
    comps = connected_components(mask)
    w, h = mask.width, mask.height
    preds = []
    n = int(rng.integers(0, max_preds + 1))
    for _ in range(n):
        kind = rng.random()
        box = None
        if comps and kind < 0.35:
            box = _jitter(rng, comps[rng.integers(len(comps))].bounds, w, h, 0.05)
        elif comps and kind < 0.6:
            b = comps[rng.integers(len(comps))].bounds
            if rng.random() < 0.5:
                mid = b.x_min + b.width * rng.uniform(0.3, 0.7)
                box = Box(b.x_min, b.y_min, mid, b.y_max) if rng.random() < 0.5 else Box(mid, b.y_min, b.x_max, b.y_max)
            else:
                mid = b.y_min + b.height * rng.uniform(0.3, 0.7)
                box = Box(b.x_min, b.y_min, b.x_max, mid) if rng.random() < 0.5 else Box(b.x_min, mid, b.x_max, b.y_max)
        elif len(comps) > 1 and kind < 0.8:
            i, j = rng.choice(len(comps), 2, replace=False)
            a, b = comps[i].bounds, comps[j].bounds
            box = _jitter(rng, Box(min(a.x_min, b.x_min), min(a.y_min, b.y_min),
                                   max(a.x_max, b.x_max), max(a.y_max, b.y_max)), w, h, 0.02)
        else:
            x0, y0 = rng.uniform(0, w - 2), rng.uniform(0, h - 2)
            box = Box(x0, y0, rng.uniform(x0 + 1, w), rng.uniform(y0 + 1, h))
        if box is None:
            continue
        scores = np.round(rng.random(num_classes), 2)
        if rng.random() < 0.3:
            scores[rng.integers(num_classes)] = rng.choice([0.1, 0.4, 0.5, 0.8])
        cat = int(np.argmax(scores)) + 1
        preds.append(ScoredBox(box, cat, tuple(scores), float(scores.max())))
    return preds


def separable_image(width=20, height=20, obj=(6, 6, 14, 14), color=(255, 0, 0)):
    """Black image with one solid coloured rectangle (xyxy pixel bounds)."""
    img = np.zeros((height, width, 3), dtype=np.uint8)
    x0, y0, x1, y1 = obj
    img[y0:y1, x0:x1] = color
    return img


def random_blob_image(rng, width, height):
    """Noisy background with a few solid-colour blobs; returns image and
    the blob rectangles as ``(Box, category)``."""
    img = rng.normal(60, 20, (height, width, 3))
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        bw, bh = int(rng.integers(6, max(7, width // 2))), int(rng.integers(6, max(7, height // 2)))
        x, y = int(rng.integers(0, width - bw + 1)), int(rng.integers(0, height - bh + 1))
        color = rng.uniform(0, 255, 3)
        img[y + 1:y + bh - 1, x + 1:x + bw - 1] = color + rng.normal(0, 8, (bh - 2, bw - 2, 3))
        boxes.append((Box(x, y, x + bw, y + bh), int(rng.integers(1, 4))))
    return np.clip(img, 0, 255).astype(np.uint8), boxes


def random_detection_set(rng, n_images=3, max_gts=5, max_dets=20, num_classes=3):
    """Ground truth per image plus detections that are jittered copies,
    wrong-class copies, duplicates and clutter; at most ``max_dets`` in total."""
    gts, dets = {}, {}
    budget = int(rng.integers(0, max_dets + 1))
    for k in range(n_images):
        img = f"img{k}"
        boxes = []
        for _ in range(int(rng.integers(0, max_gts + 1))):
            x0, y0 = rng.uniform(0, 80, 2)
            boxes.append((Box(x0, y0, x0 + rng.uniform(5, 40), y0 + rng.uniform(5, 40)),
                          int(rng.integers(1, num_classes + 1))))
        gts[img] = boxes
        dets[img] = []
    ids = sorted(gts)
    for _ in range(budget):
        img = ids[int(rng.integers(len(ids)))]
        boxes = gts[img]
        kind = rng.random()
        if boxes and kind < 0.7:
            box, cat = boxes[int(rng.integers(len(boxes)))]
            jit = _jitter(rng, box, 200, 200, float(rng.choice([0.02, 0.1, 0.3])))
            if jit is None:
                continue
            if rng.random() < 0.2:
                cat = int(rng.integers(1, num_classes + 1))
            box = jit
        else:
            x0, y0 = rng.uniform(0, 100, 2)
            box = Box(x0, y0, x0 + rng.uniform(3, 30), y0 + rng.uniform(3, 30))
            cat = int(rng.integers(1, num_classes + 1))
        score = float(np.round(rng.random(), 2))
        dets[img].append(ScoredBox.single(box, cat, score, num_classes))
    return dets, gts
