"""Segmentation-side losses with analytic gradients.

Logit-like fields are ``(H, W, C)`` float64 arrays with ``C = n_c + 1``
channels (background first). Embedding fields are ``(H, W, d)``.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import IGNORE_LABEL, Box, SemanticMask

UNIT_TOL = 1e-6


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _check_field(arr: np.ndarray, mask: SemanticMask | None = None, name: str = "field") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (H, W, C), got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} has non-finite values")
    if mask is not None:
        if mask.shape != arr.shape[:2]:
            raise ValueError(f"{name} is {arr.shape[:2]} but mask is {mask.shape}")
        labels = mask.labels
        bad = (labels != IGNORE_LABEL) & (labels >= arr.shape[2])
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise ValueError(f"label {labels[y, x]} at ({x}, {y}) exceeds {arr.shape[2] - 1}")
    return arr


def _one_hot(labels: np.ndarray, channels: int) -> tuple[np.ndarray, np.ndarray]:
    valid = labels != IGNORE_LABEL
    onehot = np.zeros(labels.shape + (channels,))
    ys, xs = np.nonzero(valid)
    onehot[ys, xs, labels[valid]] = 1.0
    return onehot, valid


def ce_loss(logits: np.ndarray, target: SemanticMask) -> tuple[float, np.ndarray]:
    """Mean pixel cross-entropy of ``softmax(logits)`` against ``target``.

    Ignore-label pixels contribute nothing and are not counted in the mean.

    Returns:
        ``(loss, d loss / d logits)``.
    """
    logits = _check_field(logits, target, "logits")
    onehot, valid = _one_hot(target.labels, logits.shape[2])
    n = int(valid.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    loss = -(onehot * log_p)[valid].sum() / n
    grad[valid] = (np.exp(log_p) - onehot)[valid] / n
    return float(loss), grad


def attention_mse(alpha: np.ndarray, box_mask: SemanticMask) -> tuple[float, np.ndarray]:
    """Mean squared distance between ``alpha`` and the one-hot box mask.

    Returns:
        ``(loss, d loss / d alpha)``.
    """
    alpha = _check_field(alpha, box_mask, "alpha")
    onehot, valid = _one_hot(box_mask.labels, alpha.shape[2])
    n = int(valid.sum())
    grad = np.zeros_like(alpha)
    if n == 0:
        return 0.0, grad
    diff = alpha - onehot
    loss = (diff[valid] ** 2).sum() / n
    grad[valid] = 2.0 * diff[valid] / n
    return float(loss), grad


def modulate(logits: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Hadamard product of pre-modulation logits and the attention map."""
    logits, alpha = np.asarray(logits, np.float64), np.asarray(alpha, np.float64)
    if logits.shape != alpha.shape:
        raise ValueError(f"shape mismatch: {logits.shape} vs {alpha.shape}")
    return logits * alpha


def modulate_backward(logits: np.ndarray, alpha: np.ndarray, grad_out: np.ndarray):
    """Gradients ``(d/d logits, d/d alpha)`` given the upstream gradient."""
    grad_out = np.asarray(grad_out, np.float64)
    if not (logits.shape == alpha.shape == grad_out.shape):
        raise ValueError("shape mismatch in modulate_backward")
    return grad_out * alpha, grad_out * logits


def mean_box_embedding(z: np.ndarray, logits: np.ndarray, box: Box, category: int) -> np.ndarray | None:
    """Unit-length mean of ``z`` over box pixels predicted as ``category``.

    Returns ``None`` when no pixel inside the box is predicted as ``category``.
    """
    z = _check_field(z, name="z")
    logits = np.asarray(logits, np.float64)
    if z.shape[:2] != logits.shape[:2]:
        raise ValueError("embedding and logit fields differ in size")
    r0, r1, c0, c1 = box.pixel_span(z.shape[1], z.shape[0])
    hit = logits[r0:r1, c0:c1].argmax(axis=-1) == category
    if not hit.any():
        return None
    mean = z[r0:r1, c0:c1][hit].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        return None
    return mean / norm


def _check_unit(v: np.ndarray, tol: float = UNIT_TOL) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise ValueError(f"embedding must be a vector of dimension >= 2, got shape {v.shape}")
    if abs(np.linalg.norm(v) - 1.0) > tol:
        raise ValueError(f"embedding is not unit length (norm {np.linalg.norm(v):.9f})")
    return v


class KeyStore:
    """Per-category FIFO of unit-length key embeddings.

    Writers are serialised by a lock; readers take a copy with ``snapshot``.
    """

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._keys: dict[int, deque] = {}
        self._lock = threading.Lock()

    def add(self, key: np.ndarray, category: int) -> None:
        key = _check_unit(key)
        # keep the stored copy exactly unit length
        key = key / np.linalg.norm(key)
        with self._lock:
            self._keys.setdefault(int(category), deque(maxlen=self.capacity)).append(key.copy())

    def snapshot(self) -> dict[int, np.ndarray]:
        """Copy of the stored keys as ``{category: (n, d) array}``."""
        with self._lock:
            return {c: np.array(list(q)) for c, q in sorted(self._keys.items()) if q}

    def count(self, category: int) -> int:
        with self._lock:
            return len(self._keys.get(category, ()))

    def __len__(self):
        with self._lock:
            return sum(len(q) for q in self._keys.values())


def keystore_update(store: KeyStore, items: Iterable[tuple[np.ndarray, int]]) -> KeyStore:
    for key, cat in items:
        store.add(key, cat)
    return store


def triplet_object_loss(
    queries: Sequence[tuple[np.ndarray, int]],
    keys: KeyStore | dict[int, np.ndarray],
    gamma: float = 0.1,
    unit_tol: float = UNIT_TOL,
) -> tuple[float, list[np.ndarray]]:
    """Margin loss pulling each query to its class keys and away from others.

    The positive is the renormalised mean of the same-class keys and the
    negative is the nearest key of any other class. Queries without either
    contribute zero.

    Returns:
        ``(loss, gradients)`` with one gradient per query, in input order.

    Raises:
        ValueError: if a query's norm differs from 1 by more than ``unit_tol``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    snap = keys.snapshot() if isinstance(keys, KeyStore) else keys
    positives = {}
    for cat, arr in snap.items():
        m = arr.mean(axis=0)
        norm = np.linalg.norm(m)
        if norm > 0:
            positives[cat] = m / norm
    total = 0.0
    grads = []
    for q, cat in queries:
        q = _check_unit(q, unit_tol)
        grad = np.zeros_like(q)
        others = [arr for c, arr in snap.items() if c != cat]
        if cat not in positives or not others:
            grads.append(grad)
            continue
        neg_keys = np.concatenate(others)
        neg_dist = np.linalg.norm(neg_keys - q, axis=1)
        j = int(np.argmin(neg_dist))
        d_pos = float(np.linalg.norm(q - positives[cat]))
        d_neg = float(neg_dist[j])
        slack = gamma + d_pos - d_neg
        if slack > 0:
            total += slack
            if d_pos > 0:
                grad += (q - positives[cat]) / d_pos
            if d_neg > 0:
                grad -= (q - neg_keys[j]) / d_neg
        grads.append(grad)
    return float(total), grads


@dataclass(frozen=True)
class LossBreakdown:
    l_seg_supervised: float
    l_det_supervised: float
    l_m4b: float
    l_s: float
    l_alpha: float
    l_object: float
    lam: float
    total: float

    @property
    def l_b4m(self) -> float:
        return self.l_s + self.l_alpha + self.l_object


def combined_loss(
    l_det_supervised: float,
    l_m4b: float,
    l_seg_supervised: float,
    l_s: float,
    l_alpha: float,
    l_object: float,
    lam: float = 2.0,
) -> LossBreakdown:
    """Detection side plus ``lam`` times the segmentation side."""
    parts = (l_det_supervised, l_m4b, l_seg_supervised, l_s, l_alpha, l_object, lam)
    if not all(math.isfinite(p) for p in parts):
        raise ValueError(f"loss parts must be finite: {parts}")
    total = (l_det_supervised + l_m4b) + lam * (l_seg_supervised + (l_s + l_alpha + l_object))
    return LossBreakdown(l_seg_supervised, l_det_supervised, l_m4b, l_s, l_alpha, l_object,
                         lam, total)
