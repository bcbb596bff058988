"""Sparse feature token sets and their bit-exact little-endian wire form.

Layout (all little-endian)::

    magic "CSTT" (4) | version u8 | sender_id u16 | frame u32 | pose 6 x f32
    | channels u16 | height u16 | width u16 | entry_count u32
    | entries: (h u16, w u16, values channels x f16) * entry_count
    | crc32 u32 over every preceding byte

Pose order is (x, y, z, roll, pitch, yaw).
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ProtocolError
from .grid import FeatureGrid, Pose, wrap_angle

MAGIC = b"CSTT"
VERSION = 1
HEADER = struct.Struct("<4sBHI6fHHHI")
CRC = struct.Struct("<I")
OVERHEAD = HEADER.size + CRC.size


def entry_size(channels: int) -> int:
    return 4 + 2 * channels


def message_size(num_entries: int, channels: int) -> int:
    return OVERHEAD + num_entries * entry_size(channels)


def _f32(value: float) -> float:
    return float(np.float32(value))


def quantize_pose(pose: Pose) -> Pose:
    """Round a pose to what survives the f32 header, angles kept in (-pi, pi]."""

    def angle(a: float) -> float:
        q = _f32(wrap_angle(_f32(a)))
        return q if -math.pi < q <= math.pi else _f32(wrap_angle(q))

    return Pose(
        _f32(pose.x), _f32(pose.y), _f32(pose.z),
        angle(pose.roll), angle(pose.pitch), angle(pose.yaw),
        pose.timestamp,
    )


def _entry_dtype(channels: int) -> np.dtype:
    return np.dtype([("h", "<u2"), ("w", "<u2"), ("v", "<f2", (channels,))])


@dataclass(frozen=True, eq=False)
class SparseTokenSet:
    """Cells selected for transmission plus their half-precision channel vectors."""

    sender_id: int
    timestamp: int
    sender_pose: Pose
    channels: int
    height: int
    width: int
    rows: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    cols: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    values: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not (0 <= self.sender_id < 2**16):
            raise ConfigError(f"sender_id {self.sender_id} does not fit u16")
        if not (0 <= self.timestamp < 2**32):
            raise ConfigError(f"frame {self.timestamp} does not fit u32")
        for name in ("channels", "height", "width"):
            v = getattr(self, name)
            if not (1 <= v < 2**16):
                raise ConfigError(f"{name}={v} outside u16 range")
        rows = np.ascontiguousarray(self.rows, dtype=np.int64)
        cols = np.ascontiguousarray(self.cols, dtype=np.int64)
        values = np.zeros((0, self.channels), np.float16) if self.values is None else self.values
        values = np.ascontiguousarray(values, dtype=np.float16).reshape(-1, self.channels)
        if not (rows.shape == cols.shape == (values.shape[0],)):
            raise ConfigError("rows, cols and values disagree on entry count")
        if rows.size:
            if rows.min() < 0 or cols.min() < 0 or rows.max() >= self.height or cols.max() >= self.width:
                raise ConfigError("token index outside declared grid bounds")
            key = rows * self.width + cols
            if np.any(np.diff(key) <= 0):
                raise ConfigError("token entries must be sorted by (h, w) without duplicates")
            if not np.all(np.isfinite(values)):
                raise ConfigError("token values must be finite in half precision")
        for name, arr in (("rows", rows.astype(np.uint16)), ("cols", cols.astype(np.uint16)), ("values", values)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        pose = quantize_pose(self.sender_pose)
        object.__setattr__(self, "sender_pose", replace(pose, timestamp=self.timestamp))

    @classmethod
    def from_cells(cls, grid: FeatureGrid, mask: np.ndarray, sender_id: int, frame: int, pose: Pose) -> SparseTokenSet:
        """Tokens for every True cell of ``mask``, carrying the grid's values in f16."""
        rows, cols = np.nonzero(mask)  # row-major order is already (h, w) sorted
        return cls(
            sender_id, frame, pose, grid.channels, grid.height, grid.width,
            rows, cols, grid.data[rows, cols].astype(np.float16),
        )

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def nbytes(self) -> int:
        return message_size(len(self), self.channels)

    def subset(self, keep: np.ndarray) -> SparseTokenSet:
        keep = np.asarray(keep, dtype=bool)
        return SparseTokenSet(
            self.sender_id, self.timestamp, self.sender_pose, self.channels, self.height, self.width,
            self.rows[keep], self.cols[keep], self.values[keep],
        )

    def with_pose(self, pose: Pose) -> SparseTokenSet:
        return SparseTokenSet(
            self.sender_id, self.timestamp, pose, self.channels, self.height, self.width,
            self.rows, self.cols, self.values,
        )

    def mask(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        m[self.rows, self.cols] = True
        return m

    def dense_values(self) -> np.ndarray:
        """(H, W, C) float64 array with token values at their cells and zero elsewhere."""
        out = np.zeros((self.height, self.width, self.channels))
        out[self.rows, self.cols] = self.values.astype(np.float64)
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseTokenSet):
            return NotImplemented
        return (
            self.sender_id == other.sender_id
            and self.timestamp == other.timestamp
            and self.sender_pose == other.sender_pose
            and (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.values.view(np.uint16), other.values.view(np.uint16))
        )

    __hash__ = None


def encode_tokens(tokens: SparseTokenSet) -> bytes:
    p = tokens.sender_pose
    header = HEADER.pack(
        MAGIC, VERSION, tokens.sender_id, tokens.timestamp,
        p.x, p.y, p.z, p.roll, p.pitch, p.yaw,
        tokens.channels, tokens.height, tokens.width, len(tokens),
    )
    entries = np.empty(len(tokens), dtype=_entry_dtype(tokens.channels))
    entries["h"] = tokens.rows
    entries["w"] = tokens.cols
    entries["v"] = tokens.values
    body = header + entries.tobytes()
    return body + CRC.pack(zlib.crc32(body))


def decode_tokens(buf: bytes) -> SparseTokenSet:
    buf = bytes(buf)
    if len(buf) < OVERHEAD:
        raise ProtocolError(f"truncated message: {len(buf)} bytes, header needs {OVERHEAD}", len(buf))
    if buf[:4] != MAGIC:
        raise ProtocolError(f"bad magic {buf[:4]!r}", 0)
    if buf[4] != VERSION:
        raise ProtocolError(f"unsupported version {buf[4]}", 4)
    (stored_crc,) = CRC.unpack_from(buf, len(buf) - CRC.size)
    if zlib.crc32(buf[: -CRC.size]) != stored_crc:
        raise ProtocolError("checksum mismatch", len(buf) - CRC.size)
    (_, _, sender, frame, x, y, z, roll, pitch, yaw, channels, height, width, count) = HEADER.unpack_from(buf, 0)
    if channels == 0 or height == 0 or width == 0:
        raise ProtocolError("zero grid dimension in header", HEADER.size - 10)
    expected = message_size(count, channels)
    if len(buf) != expected:
        raise ProtocolError(f"length {len(buf)} does not match header ({expected})", min(len(buf), expected) - CRC.size)
    step = entry_size(channels)
    entries = np.frombuffer(buf, dtype=_entry_dtype(channels), count=count, offset=HEADER.size)
    rows = entries["h"].astype(np.int64)
    cols = entries["w"].astype(np.int64)
    bad = np.nonzero((rows >= height) | (cols >= width))[0]
    if bad.size:
        raise ProtocolError("entry index outside grid bounds", HEADER.size + int(bad[0]) * step)
    key = rows * width + cols
    bad = np.nonzero(np.diff(key) <= 0)[0]
    if bad.size:
        raise ProtocolError("entries not strictly sorted by (h, w)", HEADER.size + int(bad[0] + 1) * step)
    values = np.array(entries["v"], dtype=np.float16)
    bad = np.nonzero(~np.all(np.isfinite(values), axis=1))[0]
    if bad.size:
        raise ProtocolError("non-finite payload value", HEADER.size + int(bad[0]) * step + 4)
    pose = Pose(x, y, z, roll, pitch, yaw, frame)
    return SparseTokenSet(sender, frame, pose, channels, height, width, rows, cols, values)
