"""Trunk feature extraction and k-means (k-means++ seeding, Lloyd iterations, restarts)."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .metrics import clustering_accuracy


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    restart: int
    # inertia after every assignment step, one list per restart
    inertia_history: list[list[float]] = field(default_factory=list)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = min(int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right")), n - 1)
        centers[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[i:i + 1])[:, 0])
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, tol: float, max_iter: int):
    history = []
    k = len(centers)
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        assign = d.argmin(1)
        history.append(float(d[np.arange(len(x)), assign].sum()))
        new = centers.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[assign == j].mean(0)
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the point farthest from its own centroid
            own = ((x - new[assign]) ** 2).sum(1)
            far = int(own.argmax())
            new[j] = x[far]
            assign[far] = j
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    d = _sq_dists(x, centers)
    assign = d.argmin(1)
    inertia = float(((x - centers[assign]) ** 2).sum())
    history.append(inertia)
    return assign, centers, inertia, it, history


def kmeans(
    features: np.ndarray,
    k: int,
    seed: int = 0,
    n_init: int = 10,
    tol: float = 1e-4,
    max_iter: int = 300,
) -> KMeansResult:
    """Cluster rows of ``features``; the restart with the lowest inertia wins (earliest on ties)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if not 1 <= k <= len(x):
        raise ValueError(f"k must lie in [1, {len(x)}], got {k}")
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_init)]
    best = None
    histories = []
    for r, rng in enumerate(rngs):
        assign, centers, inertia, n_iter, hist = _lloyd(x, kmeans_plusplus(x, k, rng), tol, max_iter)
        histories.append(hist)
        if best is None or inertia < best.inertia:
            best = KMeansResult(assign, centers, inertia, n_iter, r)
    best.inertia_history = histories
    return best


def inertia_of(features: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> float:
    x = np.asarray(features, dtype=np.float64)
    return float(((x - centroids[assignments]) ** 2).sum())


def is_monotone(history, rtol: float = 1e-12) -> bool:
    h = np.asarray(history)
    return bool(np.all(h[1:] <= h[:-1] * (1 + rtol) + rtol))


def extract_features(checkpoint, clips: np.ndarray, batch_size: int = 32, fingerprint: str | None = None) -> np.ndarray:
    """Post-pool, pre-head trunk activations for each clip, in input order."""
    import torch

    if fingerprint is not None and checkpoint.taxonomy_fingerprint not in (None, fingerprint):
        warnings.warn("checkpoint was trained on a different taxonomy; trunk features are still usable",
                      stacklevel=2)
    model = checkpoint.to_model()
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(clips), batch_size):
            xb = torch.as_tensor(clips[start:start + batch_size], dtype=dtype)
            out.append(model.forward_features(xb).numpy())
    if not out:
        return np.zeros((0, checkpoint.config.feature_dim), dtype=np.float32)
    return np.concatenate(out)


def single_class_rows(manifest, label_ids):
    """Rows carrying exactly one of ``label_ids`` and the index of that label."""
    index = {lab: c for c, lab in enumerate(label_ids)}
    rows, classes = [], []
    for row, rec in enumerate(manifest.records):
        hits = [index[i] for i in rec.labels if i in index]
        if len(hits) == 1:
            rows.append(row)
            classes.append(hits[0])
    return np.asarray(rows, dtype=np.int64), np.asarray(classes, dtype=np.int64)


def cluster_report(features: np.ndarray, classes: np.ndarray | None, k: int, seed: int = 0) -> dict:
    res = kmeans(features, k, seed=seed)
    acc = None if classes is None else clustering_accuracy(res.assignments, classes, k)
    return {"k": k, "inertia": res.inertia, "accuracy": acc}


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)
