# ==================================================
# File: binary_formats.py
# Little-endian record codecs shared by bank, tile, report and descriptor files
# ==================================================

import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import crcmod.predefined
import numpy as np

from errors import DimensionError, FormatError
from pipeline_config import Config

_crc64 = crcmod.predefined.mkCrcFun('crc-64')

F32 = np.dtype('<f4')
F64 = np.dtype('<f8')

# dtype codes stored in tensor segments
DTYPE_CODES = {F32: 1, F64: 2}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


def crc64(data: bytes) -> int:
    return _crc64(data)


class BinaryWriter:
    """Append-only little-endian buffer, sealed with a trailing CRC-64"""

    def __init__(self, magic: bytes, version: int = Config.FORMAT_VERSION):
        self.buffer = bytearray(magic)
        self.u32(version)

    def u8(self, value: int):
        self.buffer += struct.pack('<B', value)

    def u32(self, value: int):
        self.buffer += struct.pack('<I', value)

    def u64(self, value: int):
        self.buffer += struct.pack('<Q', value)

    def f64(self, value: float):
        self.buffer += struct.pack('<d', value)

    def raw(self, data: bytes):
        self.buffer += data

    def string(self, text: str):
        encoded = text.encode('utf-8')
        self.u32(len(encoded))
        self.buffer += encoded

    def array(self, values: np.ndarray, dtype: np.dtype = F32):
        self.buffer += np.ascontiguousarray(values, dtype=dtype).tobytes()

    def tensor(self, values: np.ndarray):
        """dtype code, rank, shape, raw data"""
        values = np.asarray(values)
        dtype = values.dtype.newbyteorder('<')
        if dtype not in DTYPE_CODES:
            raise DimensionError(f"unsupported tensor dtype {values.dtype}")
        self.u8(DTYPE_CODES[dtype])
        self.u32(values.ndim)
        for size in values.shape:
            self.u32(size)
        self.array(values, dtype)

    def seal(self) -> bytes:
        payload = bytes(self.buffer)
        return payload + struct.pack('<Q', crc64(payload))


class BinaryReader:
    """Cursor over a sealed buffer; every failure reports its byte offset"""

    def __init__(self, data: bytes, magic: bytes, path: Optional[Union[str, Path]] = None):
        self.path = path
        if len(data) < len(magic) + 4 + 8:
            raise FormatError("file too short", offset=len(data), path=path)
        payload, stored = data[:-8], struct.unpack('<Q', data[-8:])[0]
        if data[:len(magic)] != magic:
            raise FormatError(f"bad magic {data[:len(magic)]!r}, expected {magic!r}", 0, path)
        if crc64(payload) != stored:
            raise FormatError("checksum mismatch", offset=len(payload), path=path)
        self.data = payload
        self.offset = len(magic)
        version = self.u32()
        if version != Config.FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}", self.offset - 4, path)

    def _take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"truncated record (need {size} bytes)", self.offset, self.path)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u8(self) -> int:
        return struct.unpack('<B', self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack('<I', self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack('<Q', self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack('<d', self._take(8))[0]

    def string(self) -> str:
        start = self.offset
        length = self.u32()
        try:
            return self._take(length).decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError("invalid UTF-8 identifier", start, self.path) from None

    def array(self, count: int, dtype: np.dtype = F32) -> np.ndarray:
        raw = self._take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).copy()

    def tensor(self) -> np.ndarray:
        start = self.offset
        code = self.u8()
        if code not in CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", start, self.path)
        rank = self.u32()
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        return self.array(count, CODE_DTYPES[code]).reshape(shape)

    def at_end(self) -> bool:
        return self.offset == len(self.data)

    def finish(self):
        if not self.at_end():
            raise FormatError("trailing bytes after last record", self.offset, self.path)


def read_bytes(path: Union[str, Path]) -> bytes:
    with open(path, 'rb') as f:
        return f.read()


# --------------------------------------------------
# DRSB: slide-id -> tile-index -> f32 vector
# --------------------------------------------------

SlideRecords = Dict[str, Dict[int, np.ndarray]]


def encode_slide_records(dim: int, slides: Mapping[str, Mapping[int, np.ndarray]]) -> bytes:
    writer = BinaryWriter(Config.BANK_MAGIC)
    writer.u32(dim)
    writer.u64(len(slides))
    for slide_id, tiles in slides.items():
        writer.string(slide_id)
        writer.u64(len(tiles))
        for index, vector in tiles.items():
            if np.shape(vector) != (dim,):
                raise DimensionError(f"tile {index} of {slide_id}", np.shape(vector), (dim,))
            writer.u32(index)
            writer.array(vector, F32)
    return writer.seal()


def decode_slide_records(data: bytes, path: Optional[Union[str, Path]] = None) -> Tuple[int, SlideRecords]:
    reader = BinaryReader(data, Config.BANK_MAGIC, path)
    dim = reader.u32()
    slide_count = reader.u64()
    slides: SlideRecords = {}
    for _ in range(slide_count):
        slide_id = reader.string()
        tile_count = reader.u64()
        tiles = {}
        for _ in range(tile_count):
            index = reader.u32()
            tiles[index] = reader.array(dim, F32)
        slides[slide_id] = tiles
    reader.finish()
    return dim, slides


# --------------------------------------------------
# DRST: report embeddings keyed by slide id
# --------------------------------------------------

def encode_reports(dim: int, reports: Mapping[str, np.ndarray]) -> Tuple[bytes, Dict[str, int]]:
    """Returns the sealed bytes and each record's byte offset"""
    writer = BinaryWriter(Config.REPORT_MAGIC)
    writer.u32(dim)
    writer.u64(len(reports))
    offsets = {}
    for slide_id, vector in reports.items():
        if np.shape(vector) != (dim,):
            raise DimensionError(f"report of {slide_id}", np.shape(vector), (dim,))
        offsets[slide_id] = len(writer.buffer)
        writer.string(slide_id)
        writer.array(vector, F32)
    return writer.seal(), offsets


def decode_reports(data: bytes, path: Optional[Union[str, Path]] = None) -> Tuple[int, Dict[str, np.ndarray], Dict[int, str]]:
    """Returns (dim, id -> vector, record offset -> id)"""
    reader = BinaryReader(data, Config.REPORT_MAGIC, path)
    dim = reader.u32()
    count = reader.u64()
    reports, by_offset = {}, {}
    for _ in range(count):
        offset = reader.offset
        slide_id = reader.string()
        reports[slide_id] = reader.array(dim, F32)
        by_offset[offset] = slide_id
    reader.finish()
    return dim, reports, by_offset


# --------------------------------------------------
# DRSV: flattened slide descriptors
# --------------------------------------------------

def encode_descriptors(k: int, dim: int, descriptors: Mapping[str, np.ndarray]) -> bytes:
    writer = BinaryWriter(Config.DESCRIPTOR_MAGIC)
    writer.u32(k)
    writer.u32(dim)
    for slide_id, flat in descriptors.items():
        if np.shape(flat) != (k * dim,):
            raise DimensionError(f"descriptor of {slide_id}", np.shape(flat), (k * dim,))
        writer.string(slide_id)
        writer.array(flat, F32)
    return writer.seal()


def decode_descriptors(data: bytes, path: Optional[Union[str, Path]] = None) -> Tuple[int, int, Dict[str, np.ndarray]]:
    reader = BinaryReader(data, Config.DESCRIPTOR_MAGIC, path)
    k = reader.u32()
    dim = reader.u32()
    descriptors = {}
    while not reader.at_end():
        slide_id = reader.string()
        descriptors[slide_id] = reader.array(k * dim, F32)
    return k, dim, descriptors
