"""GrabCut-style foreground extraction inside a box.

Colour models are K-component Gaussian mixtures for background and
foreground. Each iteration reassigns mixture components, refits the
mixtures and solves a binary graph cut on the 8-connected pixel grid.

The per-pixel data cost of component ``k`` is

    -log(pi_k) - log N(z | mu_k, Sigma_k) + eps/2 * tr(Sigma_k^-1)

The trace term is the penalty whose exact minimiser is the regularised
covariance ``S + eps*I``; with it, every step of an iteration minimises
the same energy and the total energy never increases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flow import FlowNetwork, max_flow
from .geometry import Box

COV_EPS = 0.01
_LOG_2PI = math.log(2 * math.pi)

# (dy, dx) neighbour offsets covering each unordered 8-neighbour pair once
_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))


@dataclass
class Gmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, 3)
    covs: np.ndarray  # (K, 3, 3)
    eps: float = COV_EPS

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @classmethod
    def fit(cls, pixels: np.ndarray, assign: np.ndarray, n_components: int,
            eps: float = COV_EPS) -> "Gmm":
        """Maximum-likelihood refit from hard component assignments."""
        pixels = np.asarray(pixels, dtype=np.float64)
        counts = np.bincount(assign, minlength=n_components).astype(np.float64)
        weights = counts / counts.sum()
        means = np.zeros((n_components, 3))
        covs = np.tile(np.eye(3) * eps, (n_components, 1, 1))
        for k in np.flatnonzero(counts):
            sel = pixels[assign == k]
            mu = sel.mean(axis=0)
            d = sel - mu
            means[k] = mu
            covs[k] = d.T @ d / len(sel) + eps * np.eye(3)
        return cls(weights, means, covs, eps)

    def component_costs(self, pixels: np.ndarray) -> np.ndarray:
        """``(N, K)`` data costs; components with zero weight cost ``inf``."""
        pixels = np.asarray(pixels, dtype=np.float64)
        out = np.full((len(pixels), self.n_components), np.inf)
        for k in np.flatnonzero(self.weights > 0):
            inv = np.linalg.inv(self.covs[k])
            _, logdet = np.linalg.slogdet(self.covs[k])
            d = pixels - self.means[k]
            maha = ((d @ inv) * d).sum(axis=1)
            const = (-math.log(self.weights[k]) + 0.5 * (logdet + 3 * _LOG_2PI)
                     + 0.5 * self.eps * np.trace(inv))
            out[:, k] = const + 0.5 * maha
        return out


def kmeans_pp(pixels: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10) -> np.ndarray:
    """Hard cluster assignment by k-means++ seeding and Lloyd iterations.

    Returns labels in ``[0, k)``; fewer clusters are used when the data has
    fewer distinct points.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    centers = [pixels[rng.integers(len(pixels))]]
    d2 = ((pixels - centers[0]) ** 2).sum(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            break
        nxt = pixels[rng.choice(len(pixels), p=d2 / total)]
        centers.append(nxt)
        d2 = np.minimum(d2, ((pixels - nxt) ** 2).sum(axis=1))
    centers = np.array(centers)
    labels = np.zeros(len(pixels), dtype=np.int64)
    for _ in range(iters):
        dist = ((pixels[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        if _ > 0 and np.array_equal(new, labels):
            break
        labels = new
        for c in range(len(centers)):
            sel = pixels[labels == c]
            if len(sel):
                centers[c] = sel.mean(axis=0)
    return labels


def _smoothness(img: np.ndarray, lam: float):
    """Neighbour pair weights ``lam * exp(-beta*|dc|^2) / dist`` per offset."""
    diffs = []
    for dy, dx in _OFFSETS:
        a, b = _shifted_pair(img, dy, dx)
        diffs.append(((a - b) ** 2).sum(axis=-1))
    total = sum(d.sum() for d in diffs)
    count = sum(d.size for d in diffs)
    mean = total / count if count else 0.0
    beta = 1.0 / (2.0 * mean) if mean > 0 else 0.0
    weights = []
    for (dy, dx), d in zip(_OFFSETS, diffs):
        dist = math.sqrt(dy * dy + dx * dx)
        weights.append(lam * np.exp(-beta * d) / dist)
    return weights


def _shifted_pair(arr: np.ndarray, dy: int, dx: int):
    """Views of ``arr[y, x]`` and ``arr[y + dy, x + dx]`` over valid pairs."""
    h, w = arr.shape[:2]
    ys = slice(0, h - dy)
    yd = slice(dy, h)
    if dx >= 0:
        xs, xd = slice(0, w - dx), slice(dx, w)
    else:
        xs, xd = slice(-dx, w), slice(0, w + dx)
    return arr[ys, xs], arr[yd, xd]


class _GrabCutState:
    def __init__(self, image, box_span, n_components, lam, rng):
        self.img = image.astype(np.float64)
        self.h, self.w = image.shape[:2]
        self.r0, self.r1, self.c0, self.c1 = box_span
        self.k = n_components
        self.rng = rng
        self.pixels = self.img.reshape(-1, 3)
        self.in_box = np.zeros((self.h, self.w), dtype=bool)
        self.in_box[self.r0:self.r1, self.c0:self.c1] = True
        self.fg = self.in_box.copy()  # current labelling, definite BG outside
        self.pair_w = _smoothness(self.img, lam)

    # energy -----------------------------------------------------------
    def _update_costs(self):
        self.bg_comp = self.bg_gmm.component_costs(self.pixels)
        self.fg_comp = self.fg_gmm.component_costs(self.pixels)

    def data_costs(self):
        """Per-pixel costs for labelling BG and FG (min over components)."""
        return (self.bg_comp.min(axis=1).reshape(self.h, self.w),
                self.fg_comp.min(axis=1).reshape(self.h, self.w))

    def energy(self) -> float:
        bg_cost, fg_cost = self.data_costs()
        data = np.where(self.fg, fg_cost, bg_cost).sum()
        smooth = 0.0
        for (dy, dx), wgt in zip(_OFFSETS, self.pair_w):
            a, b = _shifted_pair(self.fg, dy, dx)
            smooth += wgt[a != b].sum()
        return float(data + smooth)

    # model fitting ----------------------------------------------------
    def init_models(self):
        flat_fg = self.fg.ravel()
        self.bg_assign = kmeans_pp(self.pixels[~flat_fg], self.k, self.rng)
        self.fg_assign = kmeans_pp(self.pixels[flat_fg], self.k, self.rng)
        self.bg_gmm = Gmm.fit(self.pixels[~flat_fg], self.bg_assign, self.k)
        self.fg_gmm = Gmm.fit(self.pixels[flat_fg], self.fg_assign, self.k)
        self._update_costs()

    def reassign_and_refit(self):
        flat_fg = self.fg.ravel()
        self.bg_assign = self.bg_comp[~flat_fg].argmin(axis=1)
        self.fg_assign = self.fg_comp[flat_fg].argmin(axis=1)
        self.bg_gmm = Gmm.fit(self.pixels[~flat_fg], self.bg_assign, self.k)
        self.fg_gmm = Gmm.fit(self.pixels[flat_fg], self.fg_assign, self.k)
        self._update_costs()

    # graph cut --------------------------------------------------------
    def cut(self):
        bh, bw = self.r1 - self.r0, self.c1 - self.c0
        n = bh * bw
        src, snk = n, n + 1
        bg_cost, fg_cost = self.data_costs()
        box = (slice(self.r0, self.r1), slice(self.c0, self.c1))
        to_src = bg_cost[box].copy()  # paid when the pixel ends on the BG side
        to_snk = fg_cost[box].copy()  # paid when the pixel ends on the FG side
        node = np.full((self.h, self.w), -1, dtype=np.int64)
        node[box] = np.arange(n).reshape(bh, bw)
        net = FlowNetwork(n + 2, src, snk)
        for (dy, dx), wgt in zip(_OFFSETS, self.pair_w):
            a, b = _shifted_pair(node, dy, dx)
            both = (a >= 0) & (b >= 0)
            net.add_edges(a[both], b[both], wgt[both], wgt[both])
            # a box pixel next to a fixed background pixel pays on the FG side
            for inner, outer in ((a, b), (b, a)):
                edge = (inner >= 0) & (outer < 0)
                np.add.at(to_snk.ravel(), inner[edge], wgt[edge])
        shift = np.minimum(to_src, to_snk)
        idx = np.arange(n)
        net.add_edges(np.full(n, src), idx, (to_src - shift).ravel())
        net.add_edges(idx, np.full(n, snk), (to_snk - shift).ravel())
        _, side = max_flow(net)
        fg = np.zeros((self.h, self.w), dtype=bool)
        fg[box] = side[:n].reshape(bh, bw)
        self.fg = fg


def _is_degenerate(image: np.ndarray, in_box: np.ndarray) -> bool:
    if in_box.all():
        return True  # nothing is known to be background
    flat = image.reshape(-1, image.shape[-1])
    return bool((flat == flat[0]).all())


def grabcut(
    image: np.ndarray,
    box: Box,
    iters: int = 5,
    n_components: int = 5,
    lambda_smooth: float = 50.0,
    seed: int = 0,
    return_energy: bool = False,
):
    """Segment the object inside ``box``.

    Pixels outside the box are definite background; pixels inside start as
    probable foreground.

    Args:
        image: ``(H, W, 3)`` RGB raster.
        box: region of interest; clamped to the image.
        iters: number of reassign / refit / cut rounds. ``0`` returns the
            whole box as foreground.
        n_components: mixture components per colour model.
        lambda_smooth: weight of the pairwise smoothness term.
        seed: seed for the k-means++ initialisation.
        return_energy: also return the energy after initialisation and
            after every iteration.

    Returns:
        Boolean foreground map over the box's pixel span, and optionally the
        list of energies.

    Raises:
        ValueError: if the image is not RGB or the box covers fewer than
            ``n_components`` pixels.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    h, w = image.shape[:2]
    r0, r1, c0, c1 = box.pixel_span(w, h)
    n_box = (r1 - r0) * (c1 - c0)
    if n_box < n_components:
        raise ValueError(f"box covers {n_box} pixels, fewer than K={n_components}")
    full = np.ones((r1 - r0, c1 - c0), dtype=bool)
    in_box = np.zeros((h, w), dtype=bool)
    in_box[r0:r1, c0:c1] = True
    if iters <= 0 or _is_degenerate(image, in_box):
        return (full, []) if return_energy else full

    state = _GrabCutState(image, (r0, r1, c0, c1), n_components, lambda_smooth,
                          np.random.default_rng(seed))
    state.init_models()
    energies = [state.energy()]
    for _ in range(iters):
        state.reassign_and_refit()
        state.cut()
        energies.append(state.energy())
        if not state.fg.any():
            break
    fg = state.fg[r0:r1, c0:c1].copy()
    return (fg, energies) if return_energy else fg
