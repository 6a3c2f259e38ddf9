"""Feature export and a deterministic 2-D PCA for scatter plots."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _power_iteration(cov: np.ndarray, start: np.ndarray, previous: list[np.ndarray],
                     tol: float, max_iter: int) -> np.ndarray:
    """Leading eigenvector of ``cov`` restricted to the complement of ``previous``."""

    def orth(u):
        for p in previous:
            u = u - (u @ p) * p
        return u

    v = orth(start)
    v = v / np.linalg.norm(v)
    floor = 1e-12 * max(float(np.abs(cov).max()), 1e-300)
    for _ in range(max_iter):
        w = orth(cov @ v)
        norm = np.linalg.norm(w)
        if norm <= floor:  # nothing left in this subspace
            return v
        w /= norm
        if w @ v < 0:  # keep a consistent orientation while measuring convergence
            w = -w
        if np.linalg.norm(w - v) < tol:
            return w
        v = w
    return v


def pca_2d(points: np.ndarray, tol: float = 1e-8, max_iter: int = 1000):
    """Project rows of ``points`` onto the top two principal axes.

    Uses power iteration with deflation on the sample covariance.  Returns
    ``(coords, components, variances)`` with ``coords`` of shape M x 2.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs at least two samples in a 2-d array")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    d = cov.shape[0]
    start = np.ones(d) / np.sqrt(d) + np.arange(d) * 1e-3
    comps, variances = [], []
    for _ in range(min(2, d)):
        v = _power_iteration(cov, start, comps, tol, max_iter)
        comps.append(v)
        variances.append(float(v @ cov @ v))
        start = np.roll(start, 1)
    while len(comps) < 2:
        comps.append(np.zeros(d))
        variances.append(0.0)
    components = np.stack(comps)
    return centered @ components.T, components, np.array(variances)


def extract_features(model, images: np.ndarray, which="heads", batch_size: int = 256):
    """Class embeddings per head (dict head -> M x D) or backbone GAP features.

    ``which`` is ``"heads"``, a head index, or ``"penultimate"``; the last
    returns ``{-1: M x C}`` pooled backbone tokens.
    """
    model.eval()
    chunks: dict[int, list[np.ndarray]] = {}
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            x = model.tokens(Tensor(images[start : start + batch_size]))
            if which == "penultimate":
                chunks.setdefault(-1, []).append(x.data.mean(axis=1))
                continue
            idx = range(model.num_heads) if which == "heads" else [int(which)]
            for i in idx:
                chunks.setdefault(model.head_ids[i], []).append(model.heads[i].embed(x).data)
    return {k: np.concatenate(v) for k, v in chunks.items()}
