# ==================================================
# File: vlad.py
# Residual encoding of a slide against the frozen codebook
# ==================================================

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np

import autodiff as ad
import binary_formats as bf
from artifact_store import atomic_write_bytes
from codebook import Codebook, assign_batch
from errors import DimensionError, InputError
from pipeline_config import Config

logger = logging.getLogger(__name__)


@dataclass
class VladDescriptor:
    """flat is the concatenation of blocks (cluster order), globally normalised"""

    flat: ad.Tensor
    blocks: ad.Tensor
    assignments: np.ndarray
    tile_indices: np.ndarray
    norm_applied: bool

    @property
    def k(self) -> int:
        return self.blocks.shape[0]

    @property
    def dim(self) -> int:
        return self.blocks.shape[1]

    def numpy(self) -> np.ndarray:
        return self.flat.data.copy()


def _gather(cb: Codebook, fresh_indices, fresh_features: Optional[ad.Tensor],
            stale_indices, stale_features, dtype) -> Tuple[ad.Tensor, np.ndarray]:
    """All tiles as one matrix in ascending tile-index order"""
    fresh_indices = np.asarray(fresh_indices if fresh_indices is not None else [], dtype=np.int64).reshape(-1)
    stale_indices = np.asarray(stale_indices if stale_indices is not None else [], dtype=np.int64).reshape(-1)
    parts = []

    if fresh_indices.size:
        if fresh_features is None or fresh_features.shape != (fresh_indices.size, cb.dim):
            raise DimensionError("fresh features", getattr(fresh_features, 'shape', ()), (fresh_indices.size, cb.dim))
        parts.append(fresh_features)
    if stale_indices.size:
        stale = np.asarray(stale_features, dtype=dtype)
        if stale.shape != (stale_indices.size, cb.dim):
            raise DimensionError("stale features", stale.shape, (stale_indices.size, cb.dim))
        parts.append(ad.Tensor(stale, dtype=dtype))

    indices = np.concatenate([fresh_indices, stale_indices])
    if indices.size == 0:
        raise InputError("a slide needs at least one tile")
    unique, counts = np.unique(indices, return_counts=True)
    if np.any(counts > 1):
        raise InputError(f"duplicate tile index {int(unique[counts > 1][0])}")

    order = np.argsort(indices, kind='stable')
    stacked = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    return ad.index_rows(stacked, order), indices[order]


def encode_slide(cb: Codebook, fresh_indices=None, fresh_features: Optional[ad.Tensor] = None,
                 stale_indices=None, stale_features: Optional[np.ndarray] = None,
                 intra_normalize: bool = False, dtype=None) -> VladDescriptor:
    """Hard-assign, sum residuals per cluster, concatenate, L2-normalise.

    Gradients reach ``fresh_features`` only; stale rows, centroids and the
    assignment are constants of the graph.
    """
    if dtype is None:
        dtype = fresh_features.dtype if fresh_features is not None else np.float64
    X, indices = _gather(cb, fresh_indices, fresh_features, stale_indices, stale_features, dtype)

    assignments = assign_batch(cb, X.data)
    centroids = cb.centroids.astype(dtype)
    residuals = ad.sub(X, ad.Tensor(centroids[assignments]))

    onehot = np.zeros((cb.k, indices.size), dtype=dtype)
    onehot[assignments, np.arange(indices.size)] = 1.0
    blocks = ad.matmul(ad.Tensor(onehot), residuals)
    if intra_normalize:
        blocks = ad.l2_normalize(blocks)

    flat = ad.l2_normalize(ad.reshape(blocks, (cb.k * cb.dim,)))
    norm_applied = bool(np.linalg.norm(flat.data) > Config.NORM_EPS)
    return VladDescriptor(flat, ad.reshape(flat, (cb.k, cb.dim)), assignments, indices, norm_applied)


def residual_blocks(cb: Codebook, features: np.ndarray) -> np.ndarray:
    """Unnormalised (K, d) residual sums, for additivity checks"""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cb.dim:
        raise DimensionError("residual_blocks", X.shape, (cb.dim,))
    assignments = assign_batch(cb, X)
    blocks = np.zeros((cb.k, cb.dim), dtype=np.float64)
    np.add.at(blocks, assignments, X - cb.centroids[assignments])
    return blocks


def encode_all(cb: Codebook, features: np.ndarray, intra_normalize: bool = False) -> np.ndarray:
    """Constant descriptor of a whole slide (no graph attachment)"""
    features = np.asarray(features)
    result = encode_slide(cb, stale_indices=np.arange(features.shape[0]), stale_features=features,
                          intra_normalize=intra_normalize, dtype=features.dtype)
    return result.numpy()


@dataclass
class GradContractReport:
    passed: bool
    fd: ad.GradCheckReport
    constant_leaks: Tuple[str, ...]
    trainable_path: bool


def grad_contract_check(cb: Codebook, fresh_features: np.ndarray, stale_features: np.ndarray,
                        loss: Optional[Callable[[ad.Tensor], ad.Tensor]] = None,
                        tol: float = 1e-4) -> GradContractReport:
    """Finite-difference check of d loss / d fresh, plus absence of stale and centroid paths.

    Fresh tiles take indices 0..m-1 and stale tiles m..m+s-1.
    """
    loss = loss or ad.total
    fresh = np.asarray(fresh_features, dtype=np.float64).reshape(-1, cb.dim)
    stale = np.asarray(stale_features, dtype=np.float64).reshape(-1, cb.dim)
    m, s = fresh.shape[0], stale.shape[0]
    fresh_idx, stale_idx = np.arange(m), np.arange(m, m + s)

    def objective(params):
        return loss(encode_slide(cb, fresh_idx, params[0], stale_idx, stale).flat)

    leaks = []
    if m:
        leaf = ad.Tensor(fresh, requires_grad=True)
        out = loss(encode_slide(cb, fresh_idx, leaf, stale_idx, stale).flat)
        for node in _graph_leaves(out):
            if node.requires_grad and node is not leaf:
                leaks.append(f"node {node.node_id}")
        fd = ad.grad_check(objective, [fresh], tol=tol)
        trainable = out.requires_grad
    else:
        out = loss(encode_slide(cb, stale_indices=stale_idx, stale_features=stale).flat)
        fd = ad.GradCheckReport(passed=True, tol=tol)
        trainable = out.requires_grad

    passed = fd.passed and not leaks and (trainable == (m > 0))
    return GradContractReport(passed, fd, tuple(leaks), trainable)


def _graph_leaves(out: ad.Tensor):
    seen, stack, leaves = set(), [out], []
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        if not node.parents:
            leaves.append(node)
        stack.extend(node.parents)
    return leaves


# --------------------------------------------------
# DRSV descriptor files
# --------------------------------------------------

def save_descriptors(path: Union[str, Path], k: int, dim: int, descriptors: Mapping[str, np.ndarray]):
    atomic_write_bytes(path, bf.encode_descriptors(k, dim, descriptors))
    logger.info("descriptors_saved path=%s slides=%d k=%d d=%d", path, len(descriptors), k, dim)


def load_descriptors(path: Union[str, Path]) -> Tuple[int, int, Dict[str, np.ndarray]]:
    return bf.decode_descriptors(bf.read_bytes(path), path)
