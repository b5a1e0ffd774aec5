"""Evaluation metrics: endpoint probes and canonical correlations."""

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import StratifiedKFold, cross_val_predict
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler


def probe_auc(features, labels, folds=5, seed=0):
    """Cross-validated ROC AUC of a standardized logistic-regression probe.

    Out-of-fold probabilities from stratified ``folds``-fold splits are pooled
    before scoring, so each patient is scored by a probe that never saw it.
    With fewer than ``folds`` members in the minority class the fold count
    drops to that size (never below 2).
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if len(np.unique(y)) < 2:
        raise ValueError("probe needs both outcome classes")
    folds = max(2, min(folds, int(np.bincount(y).min())))
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
    cv = StratifiedKFold(folds, shuffle=True, random_state=seed)
    p = cross_val_predict(probe, X, y, cv=cv, method="predict_proba")[:, 1]
    return float(roc_auc_score(y, p))


def canonical_correlations(X, Y):
    """Canonical correlations between the columns of ``X`` and ``Y``.

    Both blocks are centred and orthonormalized by QR; the singular values of
    ``Qx^T Qy`` are the canonical correlations, largest first.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) != len(Y):
        raise ValueError("X and Y need the same number of rows")
    qx = _orthonormal(X - X.mean(0))
    qy = _orthonormal(Y - Y.mean(0))
    s = np.linalg.svd(qx.T @ qy, compute_uv=False)
    return np.clip(s, 0.0, 1.0)


def _orthonormal(A, rtol=1e-10):
    q, r = np.linalg.qr(A)
    d = np.abs(np.diag(r))
    keep = d > rtol * max(d.max(initial=0.0), 1e-300)
    return q[:, keep]


def mean_canonical_correlation(X, Y):
    return float(canonical_correlations(X, Y).mean())


def r_squared(features, target):
    """Fraction of ``target`` variance explained by an affine map of ``features``."""
    A = np.column_stack([np.asarray(features, dtype=float), np.ones(len(features))])
    y = np.asarray(target, dtype=float)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return float(1.0 - (resid ** 2).sum(0).sum() / ((y - y.mean(0)) ** 2).sum(0).sum())
