"""Ego-side recurrent memory: one slot per collaborator plus one fused slot."""

from __future__ import annotations

import struct
import zlib
from typing import NamedTuple

from .errors import OrderingError, ProtocolError
from .grid import FeatureGrid, Pose
from .stt import select_all
from .wire import decode_tokens, encode_tokens

SNAPSHOT_MAGIC = b"CMBK"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sBI")
_SLOT_HEAD = struct.Struct("<idddI")  # agent id (-1 = fused), resolution, origin x, origin y, payload length
_FUSED_ID = -1


class Slot(NamedTuple):
    grid: FeatureGrid
    pose: Pose
    frame: int


class MemoryBank:
    """Stores the last reconstruction per agent and the last fused feature.

    A lookup miss returns ``None``. Updates must advance the frame index of
    the slot they overwrite.
    """

    def __init__(self) -> None:
        self._agents: dict[int, Slot] = {}
        self._fused: Slot | None = None

    def __len__(self) -> int:
        return len(self._agents) + (self._fused is not None)

    def agent_ids(self) -> list[int]:
        return sorted(self._agents)

    def get(self, agent_id: int) -> Slot | None:
        return self._agents.get(agent_id)

    def put(self, agent_id: int, grid: FeatureGrid, pose: Pose, frame: int) -> None:
        _check_order(self._agents.get(agent_id), frame, f"agent {agent_id}")
        self._agents[agent_id] = Slot(grid, pose, int(frame))

    def get_fused(self) -> Slot | None:
        return self._fused

    def put_fused(self, grid: FeatureGrid, pose: Pose, frame: int) -> None:
        _check_order(self._fused, frame, "fused slot")
        self._fused = Slot(grid, pose, int(frame))

    def snapshot(self) -> bytes:
        """Serialize every slot as a dense token message (values become f16)."""
        slots = [(aid, s) for aid, s in sorted(self._agents.items())]
        if self._fused is not None:
            slots.append((_FUSED_ID, self._fused))
        parts = [_SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, len(slots))]
        for aid, slot in slots:
            msg = encode_tokens(select_all(slot.grid, sender_id=max(aid, 0), frame=slot.frame, pose=slot.pose))
            ox, oy = slot.grid.origin
            parts.append(_SLOT_HEAD.pack(aid, slot.grid.resolution, ox, oy, len(msg)))
            parts.append(msg)
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def restore(cls, blob: bytes) -> MemoryBank:
        if len(blob) < _SNAP_HEADER.size + 4:
            raise ProtocolError("truncated memory snapshot", len(blob))
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise ProtocolError("memory snapshot checksum mismatch", len(blob) - 4)
        magic, version, count = _SNAP_HEADER.unpack_from(body, 0)
        if magic != SNAPSHOT_MAGIC:
            raise ProtocolError(f"bad snapshot magic {magic!r}", 0)
        if version != SNAPSHOT_VERSION:
            raise ProtocolError(f"unsupported snapshot version {version}", 4)
        bank = cls()
        offset = _SNAP_HEADER.size
        for _ in range(count):
            if offset + _SLOT_HEAD.size > len(body):
                raise ProtocolError("truncated slot header", offset)
            aid, res, ox, oy, length = _SLOT_HEAD.unpack_from(body, offset)
            offset += _SLOT_HEAD.size
            tokens = decode_tokens(body[offset : offset + length])
            offset += length
            grid = FeatureGrid(tokens.dense_values(), res, (ox, oy))
            if aid == _FUSED_ID:
                bank.put_fused(grid, tokens.sender_pose, tokens.timestamp)
            else:
                bank.put(aid, grid, tokens.sender_pose, tokens.timestamp)
        if offset != len(body):
            raise ProtocolError("trailing bytes after last slot", offset)
        return bank


def _check_order(previous: Slot | None, frame: int, what: str) -> None:
    if previous is not None and not frame > previous.frame:
        raise OrderingError(f"{what}: frame {frame} does not advance stored frame {previous.frame}")

