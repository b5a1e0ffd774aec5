"""Simplified UMAP: exact kNN graph, fuzzy union, SGD layout with negative sampling."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.optimize import curve_fit
from scipy.spatial import cKDTree

from ..data import DataContractError

N_NEIGHBORS_GRID = (15, 30, 50, 100)
SMOOTH_K_TOLERANCE = 1e-5
NEGATIVE_SAMPLES = 5
GRAD_CLIP = 4.0


@dataclass
class Embedding2D:
    """Embedded (patient, step) points.

    Attributes
    ----------
    coords : ndarray, shape (n, n_components)
    patient : ndarray of int
        Index of the source patient for every point.
    step : ndarray of int
        Step index within that patient's trajectory.
    endpoint : ndarray of bool
        True on each patient's last step.
    """

    coords: np.ndarray
    patient: np.ndarray
    step: np.ndarray
    endpoint: np.ndarray

    def __len__(self):
        return len(self.coords)


@lru_cache(maxsize=None)
def curve_parameters(spread=1.0, min_dist=0.1):
    """Fit ``a, b`` of the low-dimensional similarity ``1 / (1 + a d^(2b))``."""
    x = np.linspace(0, spread * 3, 300)
    y = np.where(x < min_dist, 1.0, np.exp(-(x - min_dist) / spread))
    (a, b), _ = curve_fit(lambda d, a, b: 1.0 / (1.0 + a * d ** (2 * b)), x, y)
    return float(a), float(b)


def _check_points(points, n_neighbors):
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise DataContractError(f"expected a 2-D point array, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise DataContractError("latents contain non-finite values")
    if len(points) < n_neighbors + 1:
        raise DataContractError(f"need at least {n_neighbors + 1} points, got {len(points)}")
    return points


def exact_knn(reference, queries, k, exclude_self=False):
    """Euclidean k nearest neighbours of ``queries`` among ``reference``.

    With ``exclude_self`` the query set is the reference set and each point's
    own index is removed (duplicates of a point remain eligible neighbours).
    """
    tree = cKDTree(reference)
    extra = 1 if exclude_self else 0
    dist, idx = tree.query(queries, k=k + extra)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    if not exclude_self:
        return idx, dist
    own = idx == np.arange(len(queries))[:, None]
    # drop the self column, or the farthest one when self tied with a duplicate
    drop = np.where(own.any(axis=1), own.argmax(axis=1), k)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(len(idx)), drop] = False
    return idx[keep].reshape(len(idx), k), dist[keep].reshape(len(idx), k)


def smooth_knn(dist, n_iter=64):
    """Per-point ``(rho, sigma)`` so that the membership strengths sum to log2(k)."""
    n, k = dist.shape
    target = np.log2(k)
    rho = np.where(dist > 0, dist, np.inf).min(axis=1)
    rho[np.isinf(rho)] = 0.0
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    sigma = np.ones(n)
    gap = np.maximum(dist - rho[:, None], 0.0)
    for _ in range(n_iter):
        total = np.exp(-gap / sigma[:, None]).sum(axis=1)
        done = np.abs(total - target) < SMOOTH_K_TOLERANCE
        big = total > target
        hi = np.where(big & ~done, sigma, hi)
        lo = np.where(~big & ~done, sigma, lo)
        sigma = np.where(done, sigma, np.where(np.isinf(hi), sigma * 2, (lo + hi) / 2))
    mean_all = dist.mean()
    floor = 1e-3 * np.where(rho > 0, dist.mean(axis=1), mean_all)
    return rho, np.maximum(sigma, floor)


def membership(dist, rho, sigma):
    return np.exp(-np.maximum(dist - rho[:, None], 0.0) / sigma[:, None])


def fuzzy_graph(points, n_neighbors):
    """Symmetrized fuzzy simplicial set as COO arrays ``(rows, cols, weights)``."""
    idx, dist = exact_knn(points, points, n_neighbors, exclude_self=True)
    rho, sigma = smooth_knn(dist)
    w = membership(dist, rho, sigma)
    n = len(points)
    rows = np.repeat(np.arange(n), n_neighbors)
    W = sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, n))
    # fuzzy union: w_ij + w_ji - w_ij w_ji
    P = (W + W.T - W.multiply(W.T)).tocoo()
    off = P.row != P.col
    order = np.lexsort((P.col[off], P.row[off]))
    return P.row[off][order].astype(np.int64), P.col[off][order].astype(np.int64), P.data[off][order]


def _prune(rows, cols, weights, n_epochs):
    keep = weights >= weights.max() / n_epochs
    return rows[keep], cols[keep], weights[keep]


def optimize_layout(head_emb, tail_emb, rows, cols, weights, n_epochs, rng, move_tail, a, b):
    """Epoch-batched SGD on the UMAP cross-entropy.

    Every epoch processes the edges scheduled for that epoch in one vectorized
    step.  ``move_tail`` applies the symmetric update to the tail point, which
    is only wanted when head and tail share one embedding.
    """
    epochs_per_sample = weights.max() / weights
    next_sample = epochs_per_sample.copy()
    n_tail = len(tail_emb)
    for epoch in range(n_epochs):
        alpha = 1.0 - epoch / n_epochs
        due = np.flatnonzero(next_sample <= epoch + 1)
        if len(due) == 0:
            continue
        next_sample[due] += epochs_per_sample[due]
        i, j = rows[due], cols[due]
        diff = head_emb[i] - tail_emb[j]
        d2 = (diff ** 2).sum(axis=1)
        coef = np.where(d2 > 0, -2 * a * b * d2 ** np.maximum(b - 1, -50) / (1 + a * d2 ** b), 0.0)
        g = np.clip(coef[:, None] * diff, -GRAD_CLIP, GRAD_CLIP) * alpha
        np.add.at(head_emb, i, g)
        if move_tail:
            np.add.at(tail_emb, j, -g)
        neg_i = np.repeat(i, NEGATIVE_SAMPLES)
        neg_j = rng.integers(0, n_tail, size=len(neg_i))
        diff = head_emb[neg_i] - tail_emb[neg_j]
        d2 = (diff ** 2).sum(axis=1)
        coef = 2 * b / ((0.001 + d2) * (1 + a * d2 ** b))
        g = np.where(d2[:, None] > 0, np.clip(coef[:, None] * diff, -GRAD_CLIP, GRAD_CLIP), GRAD_CLIP)
        g = g * alpha * (neg_j != neg_i)[:, None] if move_tail else g * alpha
        np.add.at(head_emb, neg_i, g)
    return head_emb


@dataclass
class UmapModel:
    """A fitted layout that can place new points."""

    train_points: np.ndarray
    embedding: np.ndarray
    n_neighbors: int
    n_epochs: int
    seed: int

    def transform(self, points, n_epochs=None):
        """Embed ``points`` against the fitted layout without moving it."""
        points = np.asarray(points, dtype=float)
        if not np.all(np.isfinite(points)):
            raise DataContractError("latents contain non-finite values")
        if len(points) == 0:
            return np.zeros((0, self.embedding.shape[1]))
        a, b = curve_parameters()
        rng = np.random.default_rng(self.seed + 1)
        idx, dist = exact_knn(self.train_points, points, self.n_neighbors)
        rho, sigma = smooth_knn(dist)
        w = membership(dist, rho, sigma)
        w_norm = w / w.sum(axis=1, keepdims=True)
        emb = np.einsum("nk,nkc->nc", w_norm, self.embedding[idx])
        epochs = n_epochs if n_epochs is not None else max(self.n_epochs // 3, 30)
        rows = np.repeat(np.arange(len(points)), self.n_neighbors)
        rows, cols, weights = _prune(rows, idx.ravel(), w.ravel(), epochs)
        tail = self.embedding.copy()
        return optimize_layout(emb, tail, rows, cols, weights, epochs, rng, False, a, b)


def umap_fit(points, n_neighbors=15, n_components=2, seed=0, n_epochs=200):
    """Fit the simplified UMAP layout on ``points`` and return a :class:`UmapModel`."""
    points = _check_points(points, n_neighbors)
    a, b = curve_parameters()
    rng = np.random.default_rng(seed)
    rows, cols, weights = fuzzy_graph(points, n_neighbors)
    rows, cols, weights = _prune(rows, cols, weights, n_epochs)
    emb = rng.uniform(-10, 10, size=(len(points), n_components))
    emb = optimize_layout(emb, emb, rows, cols, weights, n_epochs, rng, True, a, b)
    return UmapModel(points, emb, n_neighbors, n_epochs, seed)


def umap_embed(points, n_neighbors=15, n_components=2, seed=0, trial_downsample=None, n_epochs=200):
    """Embed pooled latent points in ``n_components`` dimensions.

    Parameters
    ----------
    points : array_like, shape (n, d)
    n_neighbors : int
        Size of the exact kNN neighbourhood.
    trial_downsample : float, optional
        If given, fit on a seeded subset of this fraction of the points and
        transform the rest through the fitted layout.

    Returns
    -------
    ndarray, shape (n, n_components)
    """
    points = _check_points(points, n_neighbors)
    # identical latents must land on identical coordinates, so embed distinct rows only
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if len(unique) < n_neighbors + 1:
        raise DataContractError(f"need at least {n_neighbors + 1} distinct points, got {len(unique)}")
    return _embed_distinct(unique, n_neighbors, n_components, seed, trial_downsample, n_epochs)[inverse]


def _embed_distinct(points, n_neighbors, n_components, seed, trial_downsample, n_epochs):
    if not trial_downsample or trial_downsample >= 1:
        return umap_fit(points, n_neighbors, n_components, seed, n_epochs).embedding
    n = len(points)
    m = max(int(round(n * trial_downsample)), n_neighbors + 1)
    if m >= n:
        return umap_fit(points, n_neighbors, n_components, seed, n_epochs).embedding
    chosen = np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))
    model = umap_fit(points[chosen], n_neighbors, n_components, seed, n_epochs)
    out = np.empty((n, n_components))
    out[chosen] = model.embedding
    rest = np.setdiff1d(np.arange(n), chosen)
    out[rest] = model.transform(points[rest])
    return out


def pool_trajectories(trajectories):
    """Stack trajectory means and return ``(points, patient, step, endpoint)``."""
    points = np.concatenate([t.means for t in trajectories])
    patient = np.concatenate([np.full(t.length, i) for i, t in enumerate(trajectories)])
    step = np.concatenate([np.arange(t.length) for t in trajectories])
    endpoint = np.concatenate([np.arange(t.length) == t.length - 1 for t in trajectories])
    return points, patient, step, endpoint


def embed_trajectories(trajectories, n_neighbors=15, seed=0, trial_downsample=0.1, n_epochs=200):
    """Embed every (patient, step) latent of ``trajectories``."""
    points, patient, step, endpoint = pool_trajectories(trajectories)
    coords = umap_embed(points, n_neighbors, 2, seed, trial_downsample, n_epochs)
    return Embedding2D(coords, patient, step, endpoint)
