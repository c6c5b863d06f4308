"""Episode persistence: record types, the ``SOPEPS1`` payload codec, a
filesystem blob store with all-or-nothing writes, and the in-memory
metadata index.

Payload layout (all little-endian)::

    magic        7 B   b"SOPEPS1"
    episode_id  16 B
    task_id      4 B   u32
    policy_ver   8 B   u64
    status       1 B
    frame_count  4 B   u32
    span_count   4 B   u32, then span_count x (start u32, end u32)
    domain_seed  8 B   u64
    source       1 B
    sim_duration 4 B   u32
    obs_dim      2 B   u16
    frames       frame_count x (obs_dim + 4) f64:
                 obs..., action, reward, expert_flag, advantage (NaN = unset)
    crc32        4 B   over everything above
"""
from __future__ import annotations

import enum
import logging
import os
import struct
import tempfile
import threading
import uuid
import zlib
from dataclasses import dataclass, field

import numpy as np

from .envsim import Status

log = logging.getLogger(__name__)

EPISODE_MAGIC = b"SOPEPS1"
_HEAD = struct.Struct("<16sIQBII")
_TAIL = struct.Struct("<QBIH")


class Source(enum.IntEnum):
    ONLINE = 0
    OFFLINE = 1


class StoreError(Exception):
    pass


class NotFoundError(StoreError, KeyError):
    pass


class IntegrityError(StoreError):
    pass


@dataclass(frozen=True)
class Frame:
    observation: np.ndarray
    action: int
    reward: float
    expert_flag: bool
    advantage_indicator: int | None = None


@dataclass(eq=False)
class EpisodeRecord:
    episode_id: uuid.UUID
    task_id: int
    domain_seed: int
    policy_version: int
    observations: np.ndarray  # (n, obs_dim)
    actions: np.ndarray  # (n,)
    rewards: np.ndarray
    expert_flags: np.ndarray  # bool
    status: Status
    intervention_spans: list[tuple[int, int]] = field(default_factory=list)
    source: Source = Source.ONLINE
    sim_duration: int = 0
    advantage: np.ndarray | None = None  # per-frame indicator bits, NaN when unset

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        if obs.ndim != 2:
            obs = obs.reshape(len(self.actions), -1) if obs.size else obs.reshape(0, 0)
        self.observations = obs
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.expert_flags = np.asarray(self.expert_flags, dtype=bool)
        self.status = Status(self.status)
        self.source = Source(self.source)
        self.intervention_spans = [(int(a), int(b)) for a, b in self.intervention_spans]
        if self.advantage is None:
            self.advantage = np.full(len(self.actions), np.nan)
        else:
            self.advantage = np.asarray(self.advantage, dtype=np.float64)

    def __len__(self):
        return len(self.actions)

    @property
    def frames(self) -> list[Frame]:
        return [Frame(self.observations[i], int(self.actions[i]), float(self.rewards[i]),
                      bool(self.expert_flags[i]),
                      None if np.isnan(self.advantage[i]) else int(self.advantage[i]))
                for i in range(len(self))]

    @property
    def storage_key(self) -> str:
        return f"episodes/{self.task_id}/{self.episode_id.hex}"

    def validate(self) -> None:
        n = len(self)
        if not (self.observations.shape[0] == self.rewards.shape[0]
                == self.expert_flags.shape[0] == self.advantage.shape[0] == n):
            raise ValueError("frame arrays disagree in length")
        if not np.all(np.isin(self.rewards, (0.0, 1.0))):
            raise ValueError("rewards must be 0 or 1")
        mask = np.zeros(n, dtype=bool)
        prev_end = 0
        for start, end in self.intervention_spans:
            if not prev_end <= start < end <= n:
                raise ValueError(f"bad intervention span {(start, end)}")
            mask[start:end] = True
            prev_end = end
        if not np.array_equal(mask, self.expert_flags):
            raise ValueError("expert_flag must be set exactly inside intervention spans")

    def equals(self, other: EpisodeRecord) -> bool:
        return (self.episode_id == other.episode_id and self.task_id == other.task_id
                and self.domain_seed == other.domain_seed
                and self.policy_version == other.policy_version
                and self.status == other.status and self.source == other.source
                and self.sim_duration == other.sim_duration
                and self.intervention_spans == other.intervention_spans
                and np.array_equal(self.observations, other.observations)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.rewards, other.rewards)
                and np.array_equal(self.expert_flags, other.expert_flags)
                and np.array_equal(self.advantage, other.advantage, equal_nan=True))


def spans_from_flags(flags) -> list[tuple[int, int]]:
    spans, start = [], None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            spans.append((start, i))
            start = None
    if start is not None:
        spans.append((start, len(flags)))
    return spans


def encode_episode(record: EpisodeRecord) -> bytes:
    record.validate()
    n, d = record.observations.shape
    parts = [EPISODE_MAGIC,
             _HEAD.pack(record.episode_id.bytes, record.task_id, record.policy_version,
                        int(record.status), n, len(record.intervention_spans))]
    parts += [struct.pack("<II", a, b) for a, b in record.intervention_spans]
    parts.append(_TAIL.pack(record.domain_seed & 0xFFFFFFFFFFFFFFFF, int(record.source),
                            record.sim_duration, d))
    table = np.empty((n, d + 4), dtype="<f8")
    table[:, :d] = record.observations
    table[:, d] = record.actions
    table[:, d + 1] = record.rewards
    table[:, d + 2] = record.expert_flags
    table[:, d + 3] = record.advantage
    parts.append(table.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_episode(buf: bytes) -> EpisodeRecord:
    if len(buf) < len(EPISODE_MAGIC) + 4 or not buf.startswith(EPISODE_MAGIC):
        raise IntegrityError("bad episode magic")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("episode checksum mismatch")
    try:
        off = len(EPISODE_MAGIC)
        eid, task, ver, status, n, nspans = _HEAD.unpack_from(body, off)
        off += _HEAD.size
        spans = [struct.unpack_from("<II", body, off + 8 * i) for i in range(nspans)]
        off += 8 * nspans
        seed, source, duration, d = _TAIL.unpack_from(body, off)
        off += _TAIL.size
        if len(body) - off != n * (d + 4) * 8:
            raise IntegrityError("frame table size mismatch")
        table = np.frombuffer(body, dtype="<f8", offset=off).reshape(n, d + 4).astype(np.float64)
        record = EpisodeRecord(uuid.UUID(bytes=eid), task, seed, ver, table[:, :d],
                               table[:, d].astype(np.int64), table[:, d + 1],
                               table[:, d + 2] != 0, Status(status), spans, Source(source),
                               duration, table[:, d + 3].copy())
        record.validate()
    except (struct.error, ValueError) as exc:
        raise IntegrityError(f"undecodable episode: {exc}") from None
    return record


class EpisodeStore:
    """Filesystem blob store keyed by S3-style paths.

    Writes go to a temp file in the destination directory and become visible
    through a single ``os.replace``; a crash at any point before the rename
    leaves the key absent. ``_fault_hook`` is called at every write point and
    exists for crash-injection tests.
    """

    TMP_PREFIX = ".tmp-"

    def __init__(self, root, chunk_size: int = 4096, fsync: bool = True):
        self.root = os.fspath(root)
        self.chunk_size = chunk_size
        self.fsync = fsync
        self._fault_hook = None
        os.makedirs(self.root, exist_ok=True)

    def _path(self, key: str) -> str:
        if key.startswith("/") or ".." in key.split("/"):
            raise ValueError(f"invalid key {key!r}")
        return os.path.join(self.root, *key.split("/"))

    def _point(self, name: str) -> None:
        if self._fault_hook is not None:
            self._fault_hook(name)

    def put_bytes(self, key: str, data: bytes) -> str:
        path = self._path(key)
        directory = os.path.dirname(path)
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=self.TMP_PREFIX)
        try:
            with os.fdopen(fd, "wb") as fh:
                self._point("open")
                for i in range(0, len(data), self.chunk_size):
                    fh.write(data[i:i + self.chunk_size])
                    fh.flush()
                    self._point(f"write:{i}")
                if self.fsync:
                    os.fsync(fh.fileno())
                self._point("fsync")
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise
        self._point("renamed")
        return key

    def get_bytes(self, key: str) -> bytes:
        try:
            with open(self._path(key), "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            raise NotFoundError(key) from None

    def exists(self, key: str) -> bool:
        return os.path.isfile(self._path(key))

    def delete(self, key: str) -> None:
        try:
            os.unlink(self._path(key))
        except FileNotFoundError:
            pass

    def keys(self, prefix: str = "") -> list[str]:
        out = []
        for dirpath, _, files in os.walk(self.root):
            for name in files:
                if name.startswith(self.TMP_PREFIX):
                    continue
                key = os.path.relpath(os.path.join(dirpath, name), self.root).replace(os.sep, "/")
                if key.startswith(prefix):
                    out.append(key)
        return sorted(out)

    def sweep_temp(self) -> int:
        """Remove temp files orphaned by crashed writers."""
        removed = 0
        for dirpath, _, files in os.walk(self.root):
            for name in files:
                if name.startswith(self.TMP_PREFIX):
                    os.unlink(os.path.join(dirpath, name))
                    removed += 1
        return removed

    def quarantine(self, key: str) -> str:
        """Move a blob under ``quarantine/`` so it is kept for inspection but never re-read."""
        dest = "quarantine/" + key
        os.makedirs(os.path.dirname(self._path(dest)), exist_ok=True)
        os.replace(self._path(key), self._path(dest))
        return dest

    def put_episode(self, record: EpisodeRecord) -> str:
        return self.put_bytes(record.storage_key, encode_episode(record))

    def get_episode(self, key: str) -> EpisodeRecord:
        return decode_episode(self.get_bytes(key))


@dataclass(frozen=True)
class EpisodeMeta:
    episode_id: uuid.UUID
    task_id: int
    frame_count: int
    storage_key: str
    sampling_weight: float = 1.0

    @classmethod
    def from_record(cls, record: EpisodeRecord, storage_key: str | None = None):
        return cls(record.episode_id, record.task_id, len(record),
                   storage_key or record.storage_key)


class EpisodeIndex:
    """In-memory metadata index; holds no frame payloads."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_id: dict[uuid.UUID, EpisodeMeta] = {}
        self._by_task: dict[int, list[EpisodeMeta]] = {}

    def insert(self, meta: EpisodeMeta) -> bool:
        """Returns False when the episode id is already indexed."""
        if meta.frame_count < 0 or not meta.sampling_weight > 0:
            raise ValueError("invalid episode metadata")
        with self._lock:
            if meta.episode_id in self._by_id:
                return False
            self._by_id[meta.episode_id] = meta
            self._by_task.setdefault(meta.task_id, []).append(meta)
            return True

    def __contains__(self, episode_id) -> bool:
        return episode_id in self._by_id

    def __len__(self):
        return len(self._by_id)

    def list_by_task(self, task_id: int) -> list[EpisodeMeta]:
        with self._lock:
            return list(self._by_task.get(task_id, ()))

    def tasks(self) -> list[int]:
        return sorted(self._by_task)

    def nbytes(self) -> int:
        """Approximate serialized size of the index contents."""
        return sum(16 + 4 + 4 + 8 + len(m.storage_key) for m in self._by_id.values())
