# ==================================================
# File: memory_bank.py
# Persistent slide -> tile -> feature store refreshed during training
# ==================================================

import logging
import threading
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import binary_formats as bf
from artifact_store import atomic_write_bytes
from errors import DimensionError, InputError, MissingSlideError
from pipeline_config import Config

logger = logging.getLogger(__name__)

Update = Tuple[str, int, np.ndarray]


class MemoryBank:
    """Two-level map of unit-norm float32 tile features.

    Readers get copies. Writers hold the lock for a whole batch, so a reader
    sees either all or none of one ``replace_batch`` call.
    """

    def __init__(self, feature_dim: int):
        if feature_dim < 1:
            raise DimensionError(f"feature_dim must be positive, got {feature_dim}")
        self.feature_dim = feature_dim
        self.version = 0
        self._entries: Dict[str, Dict[int, np.ndarray]] = {}
        self._declared: Dict[str, int] = {}
        self._lock = threading.Lock()

    # ------------------------------------------------------------------
    # writes

    def _prepare(self, feature: np.ndarray) -> np.ndarray:
        vector = np.array(feature, dtype=bf.F32).reshape(-1)
        if vector.shape != (self.feature_dim,):
            raise DimensionError("bank feature", np.shape(feature), (self.feature_dim,))
        norm = float(np.linalg.norm(vector.astype(np.float64)))
        if norm > Config.NORM_EPS and abs(norm - 1.0) > Config.UNIT_NORM_TOL:
            vector = (vector.astype(np.float64) / norm).astype(bf.F32)
        vector.setflags(write=False)
        return vector

    def insert(self, slide_id: str, tile_index: int, feature: np.ndarray):
        if tile_index < 0:
            raise InputError(f"tile index must be non-negative, got {tile_index}")
        vector = self._prepare(feature)
        with self._lock:
            self._entries.setdefault(slide_id, {})[int(tile_index)] = vector
            self.version += 1

    def insert_slide(self, slide_id: str, features: np.ndarray, declared: Optional[int] = None):
        """Fill a whole slide with tile indices 0..N-1"""
        features = np.asarray(features)
        if features.ndim != 2:
            raise DimensionError("slide features must be a matrix", features.shape)
        vectors = [self._prepare(row) for row in features]
        with self._lock:
            tiles = self._entries.setdefault(slide_id, {})
            for index, vector in enumerate(vectors):
                tiles[index] = vector
            self._declared[slide_id] = len(vectors) if declared is None else declared
            self.version += len(vectors)

    def replace_batch(self, updates: Sequence[Update]):
        """Overwrite existing entries; nothing is applied if any slide is unknown"""
        if not updates:
            return
        prepared = []
        for slide_id, tile_index, feature in updates:
            if slide_id not in self._entries:
                raise MissingSlideError(slide_id)
            prepared.append((slide_id, int(tile_index), self._prepare(feature)))
        with self._lock:
            for slide_id, tile_index, vector in prepared:
                self._entries[slide_id][tile_index] = vector
            self.version += len(prepared)
        logger.debug("bank_replace updates=%d version=%d", len(prepared), self.version)

    # ------------------------------------------------------------------
    # reads

    def get_slide(self, slide_id: str) -> np.ndarray:
        """(N, d) snapshot in ascending tile-index order"""
        return self.get_slide_indexed(slide_id)[1]

    def get_slide_indexed(self, slide_id: str) -> Tuple[np.ndarray, np.ndarray]:
        with self._lock:
            tiles = self._entries.get(slide_id)
            if tiles is None:
                raise MissingSlideError(slide_id)
            order = sorted(tiles)
            features = np.stack([tiles[i] for i in order]) if order else np.zeros((0, self.feature_dim), bf.F32)
        return np.asarray(order, dtype=np.int64), features

    def get(self, slide_id: str, tile_index: int) -> np.ndarray:
        with self._lock:
            tiles = self._entries.get(slide_id)
            if tiles is None:
                raise MissingSlideError(slide_id)
            if tile_index not in tiles:
                raise InputError(f"slide {slide_id!r} has no tile {tile_index}")
            return tiles[tile_index].copy()

    def slide_ids(self) -> List[str]:
        return list(self._entries)

    def slide_count(self) -> int:
        return len(self._entries)

    def tile_count(self, slide_id: str) -> int:
        if slide_id not in self._entries:
            raise MissingSlideError(slide_id)
        return len(self._entries[slide_id])

    def declared_count(self, slide_id: str) -> int:
        if slide_id not in self._declared:
            raise MissingSlideError(slide_id)
        return self._declared[slide_id]

    def total_tiles(self) -> int:
        return sum(len(tiles) for tiles in self._entries.values())

    def all_features(self) -> np.ndarray:
        """Every stored feature, slides in insertion order, tiles ascending"""
        blocks = [self.get_slide(s) for s in self.slide_ids()]
        if not blocks:
            return np.zeros((0, self.feature_dim), dtype=bf.F32)
        return np.concatenate(blocks, axis=0)

    def dump(self) -> Dict[str, Dict[int, np.ndarray]]:
        with self._lock:
            return {s: {i: v.copy() for i, v in tiles.items()} for s, tiles in self._entries.items()}

    def changed_entries(self, before: Dict[str, Dict[int, np.ndarray]]) -> List[Tuple[str, int]]:
        """(slide, tile) keys whose bytes differ from an earlier dump"""
        changed = []
        for slide_id, tiles in self.dump().items():
            old = before.get(slide_id, {})
            for index, vector in tiles.items():
                if index not in old or old[index].tobytes() != vector.tobytes():
                    changed.append((slide_id, index))
        return changed

    # ------------------------------------------------------------------
    # persistence

    def to_bytes(self) -> bytes:
        with self._lock:
            return bf.encode_slide_records(self.feature_dim, self._entries)

    @classmethod
    def from_bytes(cls, data: bytes, path: Optional[Union[str, Path]] = None) -> "MemoryBank":
        dim, slides = bf.decode_slide_records(data, path)
        bank = cls(dim)
        for slide_id, tiles in slides.items():
            for vector in tiles.values():
                vector.setflags(write=False)
            bank._entries[slide_id] = tiles
            bank._declared[slide_id] = len(tiles)
        return bank

    def save(self, path: Union[str, Path]):
        atomic_write_bytes(path, self.to_bytes())
        logger.info("bank_saved path=%s slides=%d tiles=%d", path, self.slide_count(), self.total_tiles())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MemoryBank":
        bank = cls.from_bytes(bf.read_bytes(path), path)
        logger.info("bank_loaded path=%s slides=%d d=%d", path, bank.slide_count(), bank.feature_dim)
        return bank


def fill_bank(bank: MemoryBank, slides: Iterable[Tuple[str, np.ndarray]]) -> MemoryBank:
    for slide_id, features in slides:
        bank.insert_slide(slide_id, features)
    return bank
