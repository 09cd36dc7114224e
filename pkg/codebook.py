# ==================================================
# File: codebook.py
# Fixed K-means codebook over bank features
# ==================================================

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from sklearn.cluster import kmeans_plusplus

import binary_formats as bf
from artifact_store import atomic_write_bytes
from errors import ConfigError, DimensionError, DrslError
from pipeline_config import Config

logger = logging.getLogger(__name__)

# rows per distance block
_CHUNK = 4096
# slack for floating-point noise in the monotone-inertia check
_INERTIA_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class Codebook:
    """K frozen centroids; there is no mutating method by construction"""

    centroids: np.ndarray
    kmeans_iters_run: int = 0
    final_inertia: float = 0.0
    inertia_history: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        centroids = np.array(self.centroids, dtype=np.float64)
        if centroids.ndim != 2 or centroids.shape[0] < 2:
            raise ConfigError(f"codebook needs K >= 2 centroids, got shape {centroids.shape}")
        if not np.all(np.isfinite(centroids)):
            raise DrslError("codebook centroids must be finite")
        centroids.setflags(write=False)
        object.__setattr__(self, 'centroids', centroids)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact ||x - c||^2 from differences (the expanded form breaks ties)"""
    points = np.asarray(points, dtype=np.float64)
    out = np.empty((points.shape[0], centroids.shape[0]), dtype=np.float64)
    for start in range(0, points.shape[0], _CHUNK):
        block = points[start:start + _CHUNK]
        diff = block[:, None, :] - centroids[None, :, :]
        out[start:start + _CHUNK] = np.einsum('nkd,nkd->nk', diff, diff)
    return out


def _nearest(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d2 = squared_distances(points, centroids)
    # argmin returns the first minimum, so ties go to the lowest index
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(points.shape[0]), labels]


def build(features: np.ndarray, k: int, max_iters: int = 100, tol: float = 1e-6,
          seed: int = 0, n_init: int = 1) -> Codebook:
    """k-means++ seeding then Lloyd iterations; best of ``n_init`` restarts"""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError("codebook features must be a matrix", X.shape)
    if k < 2:
        raise ConfigError(f"codebook k must be >= 2, got {k}")
    if X.shape[0] < k:
        raise ConfigError(f"need at least k={k} features to build the codebook, got {X.shape[0]}")

    seeds = [seed] if n_init == 1 else \
        np.random.default_rng(seed).integers(0, 2 ** 31 - 1, size=n_init).tolist()

    best: Optional[Codebook] = None
    for restart, run_seed in enumerate(seeds):
        candidate = _lloyd(X, k, max_iters, tol, int(run_seed))
        logger.debug("kmeans_restart index=%d inertia=%.6g iters=%d",
                     restart, candidate.final_inertia, candidate.kmeans_iters_run)
        if best is None or candidate.final_inertia < best.final_inertia:
            best = candidate

    logger.info("codebook_built k=%d d=%d points=%d inertia=%.6g iters=%d",
                k, X.shape[1], X.shape[0], best.final_inertia, best.kmeans_iters_run)
    return best


def _lloyd(X: np.ndarray, k: int, max_iters: int, tol: float, seed: int) -> Codebook:
    centroids, _ = kmeans_plusplus(X, n_clusters=k, random_state=seed)
    centroids = centroids.astype(np.float64)
    history: List[float] = []
    iters = 0

    for _ in range(max_iters):
        labels, d2 = _nearest(X, centroids)
        inertia = float(d2.sum())
        if history and inertia > history[-1] * (1.0 + _INERTIA_SLACK) + _INERTIA_SLACK:
            raise DrslError(f"k-means inertia increased from {history[-1]} to {inertia}")
        history.append(inertia)
        iters += 1

        centroids = _update(X, labels, d2, centroids)

        if len(history) > 1:
            previous = history[-2]
            if previous == 0.0 or (previous - inertia) / previous < tol:
                break

    labels, d2 = _nearest(X, centroids)
    final = float(d2.sum())
    if history and final > history[-1] * (1.0 + _INERTIA_SLACK) + _INERTIA_SLACK:
        raise DrslError(f"k-means inertia increased from {history[-1]} to {final}")
    history.append(final)
    return Codebook(centroids, iters, final, tuple(history))


def _update(X: np.ndarray, labels: np.ndarray, d2: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    k = centroids.shape[0]
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, X)
    updated = centroids.copy()
    filled = counts > 0
    updated[filled] = sums[filled] / counts[filled, None]

    empty = np.flatnonzero(~filled)
    if empty.size:
        # farthest points from their own centroid, lowest index first on ties
        order = np.lexsort((np.arange(X.shape[0]), -d2))
        for cluster, point in zip(empty, order):
            updated[cluster] = X[point]
        logger.debug("kmeans_reseed clusters=%s", empty.tolist())
    return updated


def assign(cb: Codebook, feature: np.ndarray) -> int:
    """Nearest centroid index, ties to the lowest index"""
    f = np.asarray(feature, dtype=np.float64).reshape(1, -1)
    if f.shape[1] != cb.dim:
        raise DimensionError("assign", f.shape[1:], (cb.dim,))
    return int(_nearest(f, cb.centroids)[0][0])


def assign_batch(cb: Codebook, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cb.dim:
        raise DimensionError("assign_batch", X.shape, (cb.dim,))
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return _nearest(X, cb.centroids)[0].astype(np.int64)


# --------------------------------------------------
# DRSC persistence
# --------------------------------------------------

def to_bytes(cb: Codebook) -> bytes:
    writer = bf.BinaryWriter(Config.CODEBOOK_MAGIC)
    writer.u32(cb.k)
    writer.u32(cb.dim)
    writer.u32(cb.kmeans_iters_run)
    writer.f64(cb.final_inertia)
    writer.array(cb.centroids, bf.F64)
    return writer.seal()


def from_bytes(data: bytes, path: Optional[Union[str, Path]] = None,
               expected_dim: Optional[int] = None) -> Codebook:
    reader = bf.BinaryReader(data, Config.CODEBOOK_MAGIC, path)
    k = reader.u32()
    dim = reader.u32()
    iters = reader.u32()
    inertia = reader.f64()
    centroids = reader.array(k * dim, bf.F64).reshape(k, dim)
    reader.finish()
    if expected_dim is not None and dim != expected_dim:
        raise DimensionError("codebook dimension does not match the bank", (dim,), (expected_dim,))
    return Codebook(centroids, iters, inertia)


def save(cb: Codebook, path: Union[str, Path]):
    atomic_write_bytes(path, to_bytes(cb))
    logger.info("codebook_saved path=%s k=%d d=%d", path, cb.k, cb.dim)


def load(path: Union[str, Path], expected_dim: Optional[int] = None) -> Codebook:
    return from_bytes(bf.read_bytes(path), path, expected_dim)
