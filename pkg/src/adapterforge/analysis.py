"""Measurement tools: head similarity, feature geometry, 2-D projection.

These are read-only diagnostics over numpy views of the model; nothing here
touches a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DegenerateHeadError, InsufficientSamplesError, ShapeError


@dataclass
class SimilarityReport:
    """Pairwise cosine similarities of flattened head matrices."""

    matrix: np.ndarray
    off_diag_mean: float
    off_diag_median: float


@dataclass
class GeometryReport:
    """Per-task centroids and a 2-D principal projection of pooled features."""

    centroids: np.ndarray            # [tasks x dim]
    mean_centroid_distance: float
    coords: np.ndarray               # [samples x 2]
    coord_task_ids: np.ndarray       # [samples]
    explained_variance: tuple[float, float]
    total_variance: float
    rank_deficient: bool


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def head_similarity(heads: list) -> SimilarityReport:
    """Cosine similarity between all flattened head pairs (row-major order).

    The matrix is exactly symmetric with a unit diagonal; statistics are
    taken over the N(N-1) off-diagonal entries.
    """
    if len(heads) < 2:
        raise ConfigError(f"head similarity needs at least 2 heads, got {len(heads)}")
    vecs = [_as_array(h).reshape(-1) for h in heads]
    norms = [np.linalg.norm(v) for v in vecs]
    for i, norm in enumerate(norms):
        if norm == 0.0:
            raise DegenerateHeadError(f"head {i} has zero norm; cosine similarity is undefined")
    n = len(vecs)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            cos = float(vecs[i] @ vecs[j] / (norms[i] * norms[j]))
            matrix[i, j] = cos
            matrix[j, i] = cos
    off = matrix[~np.eye(n, dtype=bool)]
    return SimilarityReport(matrix=matrix, off_diag_mean=float(off.mean()),
                            off_diag_median=float(np.median(off)))


def centroid_distance(features: list) -> float:
    """Mean Euclidean distance between per-task feature centroids.

    Accepts TaskFeatures, Tensors, or [samples x dim] arrays, one per task.
    """
    if len(features) < 2:
        raise InsufficientSamplesError(f"centroid distance needs at least 2 tasks, got {len(features)}")
    centroids = [np.asarray(_feature_rows(f)).mean(axis=0) for f in features]
    dists = []
    for i in range(len(centroids)):
        for j in range(i + 1, len(centroids)):
            dists.append(np.linalg.norm(centroids[i] - centroids[j]))
    return float(np.mean(dists))


def _feature_rows(f) -> np.ndarray:
    if hasattr(f, "features"):  # TaskFeatures
        f = f.features
    rows = _as_array(f)
    if rows.ndim != 2:
        raise ShapeError(f"features must be [samples x dim], got shape {rows.shape}")
    return rows


def _power_iteration(sym: np.ndarray, rng: np.random.Generator, tol: float,
                     max_iter: int) -> tuple[np.ndarray, float]:
    """Dominant eigenpair of a symmetric PSD matrix."""
    v = rng.standard_normal(sym.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = sym @ v
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return v, 0.0
        w /= norm
        if 1.0 - abs(float(w @ v)) < tol:
            v = w
            break
        v = w
    return v, float(v @ sym @ v)


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def pca2d(features: list, sample_cap: int = 512, seed: int = 0, tol: float = 1e-9,
          max_iter: int = 500) -> GeometryReport:
    """Project pooled features onto their top-2 principal directions.

    Components come from power iteration with deflation. When the pooled
    data has rank < 2, the second axis is an arbitrary unit vector
    orthogonal to the first and the report is flagged. Signs are
    canonicalized so the largest-magnitude loading is positive.
    """
    per_task = [(_feature_rows(f), getattr(f, "task_id", i)) for i, f in enumerate(features)]
    pooled = np.vstack([rows for rows, _ in per_task])
    task_ids = np.concatenate([np.full(rows.shape[0], tid) for rows, tid in per_task])
    if pooled.shape[0] < 3:
        raise InsufficientSamplesError(f"pca2d needs at least 3 samples, got {pooled.shape[0]}")
    if pooled.shape[1] < 2:
        raise ShapeError(f"pca2d needs feature dim >= 2, got {pooled.shape[1]}")
    rng = np.random.default_rng(seed)
    if pooled.shape[0] > sample_cap:
        keep = rng.choice(pooled.shape[0], size=sample_cap, replace=False)
        pooled_sub = pooled[keep]
        task_ids = task_ids[keep]
    else:
        pooled_sub = pooled
    centered = pooled_sub - pooled_sub.mean(axis=0)
    cov = centered.T @ centered / centered.shape[0]
    v1, lam1 = _power_iteration(cov, rng, tol, max_iter)
    deflated = cov - lam1 * np.outer(v1, v1)
    v2, lam2 = _power_iteration(deflated, rng, tol, max_iter)
    rank_deficient = lam2 <= max(lam1, 1.0) * 1e-12
    if rank_deficient:
        v2 = _orthogonal_unit(v1)
        lam2 = max(lam2, 0.0)
    else:
        v2 = v2 - (v2 @ v1) * v1
        v2 /= np.linalg.norm(v2)
    v1, v2 = _canonical_sign(v1), _canonical_sign(v2)
    coords = centered @ np.stack([v1, v2], axis=1)
    centroids = np.stack([rows.mean(axis=0) for rows, _ in per_task])
    return GeometryReport(
        centroids=centroids,
        mean_centroid_distance=centroid_distance([rows for rows, _ in per_task])
        if len(per_task) >= 2 else 0.0,
        coords=coords,
        coord_task_ids=task_ids,
        explained_variance=(float(lam1), float(lam2)),
        total_variance=float(np.trace(cov)),
        rank_deficient=bool(rank_deficient),
    )


def _orthogonal_unit(v: np.ndarray) -> np.ndarray:
    # Gram-Schmidt a basis vector chosen to avoid near-parallelism.
    basis = np.zeros_like(v)
    basis[np.argmin(np.abs(v))] = 1.0
    u = basis - (basis @ v) * v
    return u / np.linalg.norm(u)
