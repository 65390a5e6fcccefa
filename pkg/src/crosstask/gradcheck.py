"""Central finite-difference checks for the analytic loss gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .geometry import SemanticMask
from .losses import KeyStore, attention_mse, ce_loss, modulate, modulate_backward, triplet_object_loss

STEP = 1e-5
HINGE_MARGIN = 1e-4


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Euclidean norm; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def _random_labels(rng, h, w, c):
    labels = rng.integers(0, c, (h, w)).astype(np.uint8)
    labels[rng.random((h, w)) < 0.1] = 255
    return SemanticMask(labels)


def check_ce(rng) -> float:
    h, w, c = rng.integers(1, 5), rng.integers(1, 5), rng.integers(2, 6)
    logits = rng.normal(0, 2, (h, w, c))
    target = _random_labels(rng, h, w, c)
    _, grad = ce_loss(logits, target)
    return relative_error(grad, numeric_gradient(lambda x: ce_loss(x, target)[0], logits))


def check_attention(rng) -> float:
    h, w, c = rng.integers(1, 5), rng.integers(1, 5), rng.integers(2, 6)
    alpha = rng.normal(0, 1, (h, w, c))
    target = _random_labels(rng, h, w, c)
    _, grad = attention_mse(alpha, target)
    return relative_error(grad, numeric_gradient(lambda x: attention_mse(x, target)[0], alpha))


def check_modulate(rng) -> float:
    """Gradient of ``ce_loss(modulate(l, a))`` with respect to both inputs."""
    h, w, c = rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 5)
    logits = rng.normal(0, 1.5, (h, w, c))
    alpha = rng.normal(0, 1.5, (h, w, c))
    target = _random_labels(rng, h, w, c)
    _, g_out = ce_loss(modulate(logits, alpha), target)
    g_l, g_a = modulate_backward(logits, alpha, g_out)
    n_l = numeric_gradient(lambda x: ce_loss(modulate(x, alpha), target)[0], logits)
    n_a = numeric_gradient(lambda x: ce_loss(modulate(logits, x), target)[0], alpha)
    return max(relative_error(g_l, n_l), relative_error(g_a, n_a))


def _unit(v):
    return v / np.linalg.norm(v)


def check_triplet(rng, gamma: float = 0.1) -> float | None:
    """Returns ``None`` when a query sits within the hinge margin."""
    d = int(rng.integers(2, 6))
    store = KeyStore(8)
    for _ in range(int(rng.integers(2, 10))):
        store.add(_unit(rng.normal(size=d)), int(rng.integers(1, 4)))
    keys = store.snapshot()
    queries = [(_unit(rng.normal(size=d)), int(rng.integers(1, 4))) for _ in range(int(rng.integers(1, 4)))]
    _, grads = triplet_object_loss(queries, keys, gamma)
    worst = 0.0
    for i, (q, cat) in enumerate(queries):
        if _slack(q, cat, keys, gamma) is None:
            return None

        def f(x, i=i):
            qs = list(queries)
            qs[i] = (x, qs[i][1])
            return triplet_object_loss(qs, keys, gamma, unit_tol=np.inf)[0]

        worst = max(worst, relative_error(grads[i], numeric_gradient(f, q)))
    return worst


def _slack(q, cat, keys, gamma):
    if cat not in keys or not any(c != cat for c in keys):
        return 0.0
    pos = _unit(keys[cat].mean(axis=0))
    negs = np.concatenate([a for c, a in keys.items() if c != cat])
    dist = np.sort(np.linalg.norm(negs - q, axis=1))
    if len(dist) > 1 and dist[1] - dist[0] < HINGE_MARGIN:
        return None  # nearest negative is ambiguous
    slack = gamma + np.linalg.norm(q - pos) - dist[0]
    return None if abs(slack) < HINGE_MARGIN else slack


CHECKS = {
    "ce_loss": check_ce,
    "attention_mse": check_attention,
    "modulate": check_modulate,
    "triplet_object_loss": check_triplet,
}


def run_checks(seed: int, cases: int = 100) -> dict[str, tuple[int, float]]:
    """Per check: number of evaluated cases and the worst relative error."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, fn in CHECKS.items():
        done, worst = 0, 0.0
        while done < cases:
            err = fn(rng)
            if err is None:
                continue
            done += 1
            worst = max(worst, err)
        out[name] = (done, worst)
    return out
