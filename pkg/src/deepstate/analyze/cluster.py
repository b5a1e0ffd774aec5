"""k-means with k-means++ seeding, silhouette scoring and outcome labelling."""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from ..data import DataContractError

K_CANDIDATES = (2, 3, 4, 5)
SILHOUETTE_SUBSAMPLE = 10_000
OUTCOME_NAMES = ("dangerous", "intermediate", "stable")


def _sq_dists(points, centroids):
    d = (points ** 2).sum(1)[:, None] - 2 * points @ centroids.T + (centroids ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plus_plus(points, k, rng):
    """k-means++ seeding: each new centre is drawn with probability proportional to D²."""
    n = len(points)
    centres = [points[rng.integers(n)]]
    closest = ((points - centres[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            nxt = points[rng.integers(n)]
        else:
            nxt = points[rng.choice(n, p=closest / total)]
        centres.append(nxt)
        closest = np.minimum(closest, ((points - nxt) ** 2).sum(1))
    return np.array(centres, dtype=float)


@dataclass
class KMeansResult:
    """One k-means run.

    ``inertia_trace[i]`` is the within-cluster sum of squares after the i-th
    assignment step.
    """

    centroids: np.ndarray
    labels: np.ndarray
    inertia_trace: list
    n_iter: int
    reseeds: int = 0

    @property
    def k(self):
        return len(self.centroids)

    @property
    def inertia(self):
        return self.inertia_trace[-1]


def lloyd(points, k, seed=0, max_iter=300, tol=0.0):
    """Lloyd iterations from a k-means++ start.

    An empty cluster is re-seeded at the point farthest from its current
    centroid, which keeps every cluster non-empty.
    """
    points = np.asarray(points, dtype=float)
    if len(points) < k:
        raise DataContractError(f"need at least {k} points for k={k}, got {len(points)}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(points, k, rng)
    trace = []
    reseeds = 0
    labels = None
    for it in range(max_iter):
        d = _sq_dists(points, centroids)
        new = d.argmin(1)
        trace.append(float(d[np.arange(len(points)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = points[members].mean(0)
            else:
                far = d[np.arange(len(points)), labels].argmax()
                centroids[c] = points[far]
                labels[far] = c
                reseeds += 1
        if tol and len(trace) > 1 and trace[-2] - trace[-1] <= tol * trace[-2]:
            break
    d = _sq_dists(points, centroids)
    labels = d.argmin(1)
    final = float(d[np.arange(len(points)), labels].sum())
    if final != trace[-1]:
        trace.append(final)
    return KMeansResult(centroids, labels, trace, it + 1, reseeds)


def silhouette(points, labels, max_points=SILHOUETTE_SUBSAMPLE, seed=0):
    """Mean silhouette coefficient.

    Above ``max_points`` a seeded subsample is scored instead.  Points in
    singleton clusters score 0.
    """
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    if len(points) > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(len(points), max_points, replace=False))
        points, labels = points[idx], labels[idx]
    ks = np.unique(labels)
    if len(ks) < 2:
        raise DataContractError("silhouette needs at least two clusters")
    n = len(points)
    sums = np.zeros((n, len(ks)))
    chunk = 512
    for lo in range(0, n, chunk):
        d = cdist(points[lo:lo + chunk], points)
        for c, lab in enumerate(ks):
            sums[lo:lo + chunk, c] = d[:, labels == lab].sum(1)
    sizes = np.array([(labels == lab).sum() for lab in ks])
    own = np.searchsorted(ks, labels)
    own_size = sizes[own]
    a = sums[np.arange(n), own] / np.maximum(own_size - 1, 1)
    other = sums / sizes[None, :]
    other[np.arange(n), own] = np.inf
    b = other.min(1)
    s = np.where(own_size > 1, (b - a) / np.maximum(a, b), 0.0)
    return float(s.mean())


@dataclass
class ClusterModel:
    """Selected clustering of latent points (centroids live in latent space)."""

    centroids: np.ndarray
    labels: np.ndarray
    silhouette: float
    size_cv: float
    inertia_trace: list
    candidates: dict = field(default_factory=dict)

    @property
    def k(self):
        return len(self.centroids)

    def predict(self, points):
        return _sq_dists(np.asarray(points, dtype=float), self.centroids).argmin(1)


def kmeans_fit(points, k_candidates=K_CANDIDATES, seed=0, max_iter=300):
    """Cluster ``points`` for every candidate k and keep the best.

    Selection is by silhouette, with the coefficient of variation of cluster
    sizes as the tie-breaker (smaller is better).  ``candidates`` records
    ``{k: (silhouette, size_cv, inertia)}`` for the report.
    """
    points = np.asarray(points, dtype=float)
    ks = sorted(set(int(k) for k in k_candidates))
    if not ks or ks[0] < 2:
        raise DataContractError(f"k candidates must be >= 2, got {k_candidates}")
    if len(points) < ks[-1]:
        raise DataContractError(f"need at least {ks[-1]} points, got {len(points)}")
    runs = {}
    for k in ks:
        res = lloyd(points, k, seed, max_iter)
        sizes = np.bincount(res.labels, minlength=k)
        cv = float(sizes.std() / sizes.mean())
        runs[k] = (res, silhouette(points, res.labels, seed=seed), cv)
    best = min(ks, key=lambda k: (-round(runs[k][1], 12), runs[k][2], k))
    res, sil, cv = runs[best]
    summary = {k: (runs[k][1], runs[k][2], runs[k][0].inertia) for k in ks}
    return ClusterModel(res.centroids, res.labels, sil, cv, res.inertia_trace, summary)


@dataclass
class OutcomeLabels:
    """Outcome names per cluster plus the 2 x k endpoint count table.

    ``counts[0]`` counts dead endpoints and ``counts[1]`` surviving ones.
    """

    names: list
    counts: np.ndarray
    ties: bool = False
    degenerate: bool = False

    def index_of(self, name):
        return self.names.index(name)


def label_clusters_by_outcome(endpoint_labels, deaths, k):
    """Name clusters dangerous / stable / intermediate from endpoint outcomes.

    The cluster whose endpoints are most often dead is dangerous; among the
    rest, the one whose endpoints most often survive is stable.  Ties go to
    the lower cluster index and are flagged.
    """
    endpoint_labels = np.asarray(endpoint_labels, dtype=int)
    deaths = np.asarray(deaths, dtype=bool)
    if len(endpoint_labels) != len(deaths):
        raise DataContractError("one endpoint label per patient is required")
    if k < 2:
        raise DataContractError("outcome labelling needs k >= 2")
    counts = np.zeros((2, k), dtype=int)
    np.add.at(counts, (np.where(deaths, 0, 1), endpoint_labels), 1)
    totals = counts.sum(0)
    with np.errstate(invalid="ignore", divide="ignore"):
        dead_frac = np.where(totals > 0, counts[0] / totals, -np.inf)
        surv_frac = np.where(totals > 0, counts[1] / totals, -np.inf)
    dangerous = int(np.argmax(dead_frac))
    ties = int((dead_frac == dead_frac[dangerous]).sum()) > 1
    others = [c for c in range(k) if c != dangerous]
    best = max(surv_frac[c] for c in others)
    stable = next(c for c in others if surv_frac[c] == best)
    ties = ties or sum(surv_frac[c] == best for c in others) > 1
    names = ["intermediate"] * k
    names[dangerous] = "dangerous"
    names[stable] = "stable"
    degenerate = bool(deaths.all() or not deaths.any())
    return OutcomeLabels(names, counts, ties, degenerate)
