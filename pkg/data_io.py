# ==================================================
# File: data_io.py
# Manifest-driven dataset loading, synthetic slides, stratified splits
# ==================================================

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

import binary_formats as bf
from artifact_store import atomic_write_bytes, atomic_write_text
from errors import ConfigError, FormatError, LoadError, MissingSlideError, SplitError
from pipeline_config import Config

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
REPORTS_NAME = "reports.drst"
TILES_DIR = "tiles"


@dataclass(eq=False)
class SlideRecord:
    """One slide: label, tile vectors (possibly on disk) and an optional report"""

    slide_id: str
    label: int
    tile_source: Union[np.ndarray, Path]
    report: Optional[np.ndarray] = None
    input_dim: int = 0
    _tiles: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def tiles(self) -> np.ndarray:
        if self._tiles is None:
            if isinstance(self.tile_source, np.ndarray):
                self._tiles = self.tile_source
            else:
                self._tiles = read_tile_file(self.tile_source, self.slide_id, self.input_dim)
            self._tiles.setflags(write=False)
        return self._tiles

    @property
    def has_report(self) -> bool:
        return self.report is not None

    @property
    def num_tiles(self) -> int:
        return self.tiles.shape[0]


class Dataset:
    """Ordered, read-only collection of slides sharing input_dim and class count"""

    def __init__(self, records: Sequence[SlideRecord], input_dim: int, num_classes: int,
                 report_dim: int = 0):
        self.records = list(records)
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.report_dim = report_dim
        self._index = {r.slide_id: r for r in self.records}
        if len(self._index) != len(self.records):
            raise LoadError("duplicate slide ids in dataset")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SlideRecord]:
        return iter(self.records)

    def __getitem__(self, slide_id: str) -> SlideRecord:
        if slide_id not in self._index:
            raise MissingSlideError(slide_id)
        return self._index[slide_id]

    def __contains__(self, slide_id: str) -> bool:
        return slide_id in self._index

    @property
    def ids(self) -> List[str]:
        return [r.slide_id for r in self.records]

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([r.label for r in self.records], dtype=np.int64)

    def subset(self, slide_ids: Sequence[str]) -> "Dataset":
        keep = set(slide_ids)
        return Dataset([r for r in self.records if r.slide_id in keep],
                       self.input_dim, self.num_classes, self.report_dim)


# --------------------------------------------------
# Synthetic generator
# --------------------------------------------------

@dataclass
class SyntheticSpec:
    num_classes: int = 2
    slides_per_class: int = 20
    min_tiles: int = 25
    max_tiles: int = 40
    input_dim: int = 32
    signal_fraction: float = 0.3
    signal_scale: float = 4.0
    noise_scale: float = 0.5
    report_dim: int = 32
    report_noise: float = 0.5
    report_fraction: float = 1.0
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.num_classes < 2 or self.slides_per_class < 1:
            raise ConfigError("need at least 2 classes and 1 slide per class")
        if not 1 <= self.min_tiles <= self.max_tiles:
            raise ConfigError(f"need 1 <= min_tiles <= max_tiles, got {self.min_tiles}, {self.max_tiles}")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise ConfigError(f"signal_fraction must lie in (0, 1], got {self.signal_fraction}")
        if self.num_classes > self.input_dim or self.num_classes > self.report_dim:
            raise ConfigError("input_dim and report_dim must be >= num_classes")
        if self.noise_scale < 0 or self.report_noise < 0:
            raise ConfigError("noise scales must be non-negative")
        if not 0.0 <= self.report_fraction <= 1.0:
            raise ConfigError(f"report_fraction must lie in [0, 1], got {self.report_fraction}")
        return self


def orthonormal_directions(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    """count orthonormal rows in R^dim (QR of a Gaussian matrix)"""
    q, r = np.linalg.qr(rng.normal(size=(dim, count)))
    # fix column signs so the result does not depend on the LAPACK sign convention
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q.T


def generate(spec: SyntheticSpec) -> Dataset:
    """Class-structured slides: ceil(rho N) tiles around the class direction, the rest background"""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    tile_dirs = orthonormal_directions(rng, spec.input_dim, spec.num_classes)
    report_dirs = orthonormal_directions(rng, spec.report_dim, spec.num_classes)

    records = []
    for label in range(spec.num_classes):
        for s in range(spec.slides_per_class):
            n = int(rng.integers(spec.min_tiles, spec.max_tiles + 1))
            n_signal = int(math.ceil(spec.signal_fraction * n))
            noise = rng.normal(scale=spec.noise_scale, size=(n, spec.input_dim))
            noise[:n_signal] += spec.signal_scale * tile_dirs[label]
            tiles = noise[rng.permutation(n)].astype(bf.F32)

            g = rng.normal(size=spec.report_dim) / math.sqrt(spec.report_dim)
            with_report = rng.random() < spec.report_fraction
            report = None
            if with_report:
                vector = report_dirs[label] + spec.report_noise * g
                report = (vector / np.linalg.norm(vector)).astype(bf.F32)

            slide_id = f"c{label}_s{s:03d}"
            records.append(SlideRecord(slide_id, label, tiles, report, spec.input_dim))

    logger.info("synthetic_generated slides=%d classes=%d seed=%d", len(records), spec.num_classes, spec.seed)
    return Dataset(records, spec.input_dim, spec.num_classes, spec.report_dim)


# --------------------------------------------------
# On-disk layout
# --------------------------------------------------

def read_tile_file(path: Union[str, Path], slide_id: str, input_dim: int) -> np.ndarray:
    try:
        dim, slides = bf.decode_slide_records(bf.read_bytes(path), path)
    except FileNotFoundError:
        raise LoadError("tile file not found", slide_id, path) from None
    except FormatError as e:
        raise LoadError(f"corrupt tile file: {e}", slide_id, path) from None
    if dim != input_dim:
        raise LoadError(f"tile dimension {dim} does not match manifest input_dim {input_dim}", slide_id, path)
    if len(slides) != 1:
        raise LoadError(f"tile file must hold exactly one slide, found {len(slides)}", slide_id, path)
    tiles = next(iter(slides.values()))
    if not tiles:
        raise LoadError("slide has no tiles", slide_id, path)
    matrix = np.stack([tiles[i] for i in sorted(tiles)])
    if not np.all(np.isfinite(matrix)):
        raise LoadError("non-finite tile values", slide_id, path)
    return matrix


def _peek_dim(path: Path, slide_id: str) -> int:
    """u32 dimension right after the magic and version, without a full decode"""
    if not path.exists():
        raise LoadError("tile file not found", slide_id, path)
    with open(path, 'rb') as f:
        head = f.read(12)
    if len(head) < 12 or head[:4] != Config.BANK_MAGIC:
        raise LoadError("not a tile file", slide_id, path)
    return struct.unpack('<I', head[8:12])[0]


def write_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """Tile files, optional report file and the manifest; returns the manifest path"""
    directory = Path(directory)
    lines = [f"dims {dataset.input_dim} {dataset.num_classes}"]

    reports = {r.slide_id: r.report for r in dataset if r.report is not None}
    offsets: Dict[str, int] = {}
    if reports:
        data, offsets = bf.encode_reports(dataset.report_dim, reports)
        atomic_write_bytes(directory / REPORTS_NAME, data)
        lines.append(f"reports {REPORTS_NAME}")

    for record in dataset:
        relative = f"{TILES_DIR}/{record.slide_id}.drsb"
        tiles = {i: row for i, row in enumerate(record.tiles)}
        atomic_write_bytes(directory / relative, bf.encode_slide_records(dataset.input_dim, {record.slide_id: tiles}))
        line = f"slide {record.slide_id} {record.label} {relative}"
        if record.slide_id in offsets:
            line += f" {offsets[record.slide_id]}"
        lines.append(line)

    manifest = directory / MANIFEST_NAME
    atomic_write_text(manifest, "\n".join(lines) + "\n")
    logger.info("dataset_written manifest=%s slides=%d reports=%d", manifest, len(dataset), len(reports))
    return manifest


def load_manifest(path: Union[str, Path]) -> Dataset:
    """Parse and validate a manifest; tile vectors are read on first access"""
    path = Path(path)
    if not path.exists():
        raise LoadError("manifest not found", path=path)
    base = path.parent

    input_dim = num_classes = None
    report_dim = 0
    reports_by_offset: Dict[int, np.ndarray] = {}
    records = []

    for lineno, raw in enumerate(path.read_text(encoding='utf-8').splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        parts = line.split()
        kind = parts[0]

        if kind == 'dims':
            if len(parts) != 3:
                raise LoadError(f"line {lineno}: expected 'dims <input_dim> <num_classes>'", path=path)
            input_dim, num_classes = int(parts[1]), int(parts[2])
            if input_dim < 1 or num_classes < 2:
                raise LoadError(f"line {lineno}: invalid dims {input_dim} {num_classes}", path=path)

        elif kind == 'reports':
            report_path = base / parts[1]
            try:
                report_dim, reports, by_offset = bf.decode_reports(bf.read_bytes(report_path), report_path)
            except FileNotFoundError:
                raise LoadError("report file not found", path=report_path) from None
            except FormatError as e:
                raise LoadError(f"corrupt report file: {e}", path=report_path) from None
            reports_by_offset = {offset: reports[slide_id] for offset, slide_id in by_offset.items()}

        elif kind == 'slide':
            if input_dim is None:
                raise LoadError(f"line {lineno}: 'dims' must precede slides", path=path)
            if len(parts) not in (4, 5):
                raise LoadError(f"line {lineno}: expected 'slide <id> <label> <tile_file> [<report_offset>]'", path=path)
            slide_id, label, tile_path = parts[1], int(parts[2]), base / parts[3]
            if not 0 <= label < num_classes:
                raise LoadError(f"label {label} outside [0, {num_classes})", slide_id, path)
            dim = _peek_dim(tile_path, slide_id)
            if dim != input_dim:
                raise LoadError(f"tile dimension {dim} does not match input_dim {input_dim}", slide_id, tile_path)
            report = None
            if len(parts) == 5:
                offset = int(parts[4])
                if offset not in reports_by_offset:
                    raise LoadError(f"no report record at offset {offset}", slide_id, path)
                report = reports_by_offset[offset]
                norm = float(np.linalg.norm(report.astype(np.float64)))
                if abs(norm - 1.0) > Config.UNIT_NORM_TOL:
                    raise LoadError(f"report embedding is not unit-norm ({norm:.6f})", slide_id, path)
            records.append(SlideRecord(slide_id, label, tile_path, report, input_dim))

        else:
            raise LoadError(f"line {lineno}: unknown directive {kind!r}", path=path)

    if input_dim is None:
        raise LoadError("manifest has no 'dims' line", path=path)
    if not records:
        raise LoadError("manifest lists no slides", path=path)
    logger.info("manifest_loaded path=%s slides=%d", path, len(records))
    return Dataset(records, input_dim, num_classes, report_dim)


# --------------------------------------------------
# Splitting
# --------------------------------------------------

def split(dataset: Dataset, train_fraction: float, seed: int,
          reports_to_train: bool = False) -> Tuple[Dataset, Dataset]:
    """Stratified, seeded, disjoint train/test split; dataset order is kept"""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must lie in (0, 1), got {train_fraction}")

    forced = [r.slide_id for r in dataset if reports_to_train and r.has_report]
    pool = [r for r in dataset if r.slide_id not in set(forced)]
    if not pool:
        raise SplitError("every slide has a report; nothing left for the test split")

    labels = np.asarray([r.label for r in pool])
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        raise SplitError(f"class {int(classes[counts < 2][0])} has fewer than 2 slides to split")

    try:
        train_ids, _ = train_test_split([r.slide_id for r in pool], train_size=train_fraction,
                                        stratify=labels, random_state=seed)
    except ValueError as e:
        raise SplitError(str(e)) from None

    train_set = set(train_ids) | set(forced)
    train = dataset.subset([i for i in dataset.ids if i in train_set])
    test = dataset.subset([i for i in dataset.ids if i not in train_set])
    logger.info("split train=%d test=%d seed=%d", len(train), len(test), seed)
    return train, test
