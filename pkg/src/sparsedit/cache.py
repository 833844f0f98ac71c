"""Tiered activation cache with background prefetch and spill-to-file storage.

Entries are keyed by (step, layer_id, role) and live either hot (in memory)
or cold (in a spill file). A background transfer agent promotes prefetched
steps so the compute loop rarely blocks on a load; the store also works with
the agent disabled, in which case every promotion happens inline. Payloads
are immutable after put, so the pipeline's numerical output never depends on
the hot budget or on transfer timing.

Eviction is farthest-future-first: the access pattern is a forward step
sweep, so entries from steps already passed go first, then the most distant
future steps, ties broken toward larger entries. Eviction never discards
data; it only moves it cold.

Compaction rewrites layer-output entries to keep only the pixels outside the
edit mask (the reuse region), since masked pixels are recomputed and
scattered over the cached base anyway.
"""

from __future__ import annotations

import enum
import json
import os
import queue
import struct
import tempfile
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import CacheMissError, ConfigError, ContractViolation
from .masks import BinaryMask, build_pyramid

SPILL_MAGIC = b"SPCACHE1"


class Role(enum.IntEnum):
    LAYER_OUTPUT = 0
    NORM_MEAN = 1
    NORM_VAR = 2
    CROSS_ATTN_MAP = 3
    STEP_LATENT = 4
    LAYER_INPUT = 5


COMPACTABLE_ROLES = (Role.LAYER_OUTPUT, Role.LAYER_INPUT)


class CacheKey(NamedTuple):
    step: int
    layer_id: int
    role: Role


def _as_key(key) -> CacheKey:
    step, layer_id, role = key
    return CacheKey(int(step), int(layer_id), Role(role))


@dataclass
class CompactTensor:
    """Layer output reduced to its mask-complement pixels.

    values holds the stored (inactive) pixels in flat row-major order. The
    index array is whichever of the active / stored position lists is
    smaller; the other side is reconstructed by set difference.
    """

    shape: tuple[int, int, int, int]
    values: np.ndarray
    index: np.ndarray
    index_is_active: bool

    @property
    def nbytes(self) -> int:
        return int(self.values.nbytes + self.index.nbytes)

    def stored_positions(self) -> np.ndarray:
        hw = self.shape[2] * self.shape[3]
        if self.index_is_active:
            return np.setdiff1d(np.arange(hw, dtype=np.int64), self.index, assume_unique=True)
        return self.index.astype(np.int64)

    def materialize(self) -> np.ndarray:
        """Full tensor with stored pixels restored and zeros elsewhere."""
        n, c, h, w = self.shape
        full = np.zeros((n, c, h * w), dtype=np.float32)
        full[:, :, self.stored_positions()] = self.values
        return full.reshape(n, c, h, w)


def compact_tensor(arr: np.ndarray, mask_bits: np.ndarray) -> CompactTensor:
    n, c, h, w = arr.shape
    flat_bits = mask_bits.ravel()
    stored = np.flatnonzero(~flat_bits)
    active = np.flatnonzero(flat_bits)
    values = arr.reshape(n, c, h * w)[:, :, stored].copy()
    if active.size <= stored.size:
        index, is_active = active.astype(np.int32), True
    else:
        index, is_active = stored.astype(np.int32), False
    return CompactTensor((n, c, h, w), values, index, is_active)


def materialize_payload(payload):
    if isinstance(payload, CompactTensor):
        return payload.materialize()
    return payload


def _payload_nbytes(payload) -> int:
    if isinstance(payload, CompactTensor):
        return payload.nbytes
    return int(payload.nbytes)


def _serialize_payload(payload) -> bytes:
    if isinstance(payload, CompactTensor):
        head = struct.pack(
            "<B4QQB",
            1,
            *payload.shape,
            payload.index.size,
            1 if payload.index_is_active else 0,
        )
        return head + payload.index.astype("<i4").tobytes() + payload.values.astype("<f4").tobytes()
    arr = np.ascontiguousarray(payload, dtype="<f4")
    return struct.pack("<BB6Q", 0, arr.ndim, *arr.shape, *([0] * (6 - arr.ndim))) + arr.tobytes()


def _deserialize_payload(buf: bytes):
    kind = buf[0]
    if kind == 0:
        ndim = buf[1]
        dims = struct.unpack_from("<6Q", buf, 2)[:ndim]
        arr = np.frombuffer(buf, dtype="<f4", offset=2 + 48).reshape(dims)
        return arr.astype(np.float32)
    if kind == 1:
        n, c, h, w, idx_len, is_active = struct.unpack_from("<4QQB", buf, 1)
        off = 1 + 41
        index = np.frombuffer(buf, dtype="<i4", count=idx_len, offset=off).astype(np.int32)
        off += idx_len * 4
        stored = (h * w) - idx_len if is_active else idx_len
        values = np.frombuffer(buf, dtype="<f4", offset=off).reshape(n, c, stored).astype(np.float32)
        return CompactTensor((n, c, h, w), values, index, bool(is_active))
    raise ContractViolation(f"unknown payload kind {kind}")


@dataclass
class CacheEntry:
    key: CacheKey
    payload: object | None
    bytes: int
    tier: str  # "hot", "spilling", "cold"
    compacted: bool = False
    prefetched: bool = False
    spill_offset: int | None = None
    spill_len: int = 0
    spill_in_read_file: bool = False


@dataclass(frozen=True)
class CacheStats:
    hot_bytes: int
    cold_bytes: int
    total_bytes: int
    transfer_count: int
    transfer_bytes: int
    prefetch_hits: int
    blocking_loads: int
    pool_reuses: int
    pool_peak: int
    evict_warnings: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


class BufferPool:
    """Shape-keyed free list of float32 scratch buffers.

    acquire returns a zeroed buffer, reusing a released one of identical
    shape when available.
    """

    def __init__(self):
        self._free: dict[tuple, list[np.ndarray]] = {}
        self._lock = threading.Lock()
        self.reuses = 0
        self.outstanding = 0
        self.peak = 0

    def acquire(self, shape) -> np.ndarray:
        shape = tuple(int(s) for s in shape)
        with self._lock:
            bucket = self._free.get(shape)
            if bucket:
                buf = bucket.pop()
                buf.fill(0.0)
                self.reuses += 1
            else:
                buf = np.zeros(shape, dtype=np.float32)
            self.outstanding += 1
            self.peak = max(self.peak, self.outstanding)
        return buf

    def release(self, buf: np.ndarray) -> None:
        with self._lock:
            self._free.setdefault(buf.shape, []).append(buf)
            self.outstanding -= 1


class _SpillFile:
    """Append-only record file for cold payloads.

    Record layout: step, layer, role as three little-endian uint64, one role
    byte, a uint64 payload length, then the payload. A JSON index footer with
    per-key offsets is appended on close so the file can be reopened later.
    """

    HEADER = struct.Struct("<3QBQ")

    def __init__(self, path, mode: str):
        self.path = path
        self._f = open(path, mode)
        self._lock = threading.Lock()

    def append(self, key: CacheKey, payload_buf: bytes) -> tuple[int, int]:
        with self._lock:
            self._f.seek(0, os.SEEK_END)
            offset = self._f.tell()
            self._f.write(self.HEADER.pack(key.step, key.layer_id, int(key.role), int(key.role), len(payload_buf)))
            self._f.write(payload_buf)
            self._f.flush()
            return offset, self.HEADER.size + len(payload_buf)

    def read(self, offset: int, length: int) -> bytes:
        with self._lock:
            self._f.seek(offset)
            buf = self._f.read(length)
        step, layer, role64, role8, plen = self.HEADER.unpack_from(buf)
        if role64 != role8 or plen != length - self.HEADER.size:
            raise ContractViolation(f"corrupt spill record at offset {offset} in {self.path}")
        return buf[self.HEADER.size :]

    def write_footer(self, index: list[dict]) -> None:
        blob = json.dumps({"entries": index}).encode("utf-8")
        with self._lock:
            self._f.seek(0, os.SEEK_END)
            self._f.write(blob)
            self._f.write(struct.pack("<Q", len(blob)))
            self._f.write(SPILL_MAGIC)
            self._f.flush()

    @staticmethod
    def read_footer(path) -> list[dict]:
        with open(path, "rb") as f:
            f.seek(0, os.SEEK_END)
            end = f.tell()
            if end < 16:
                raise ContractViolation(f"{path} is not a spill file (too short)")
            f.seek(end - 16)
            blob_len, magic = struct.unpack("<Q8s", f.read(16))
            if magic != SPILL_MAGIC:
                raise ContractViolation(f"{path} is missing the spill index footer")
            f.seek(end - 16 - blob_len)
            blob = f.read(blob_len)
        return json.loads(blob.decode("utf-8"))["entries"]

    def close(self):
        with self._lock:
            self._f.close()


_STOP = object()


class CacheStore:
    """(step, layer, role)-addressed activation cache across hot/cold tiers."""

    def __init__(
        self,
        hot_budget: int | None = None,
        spill_path=None,
        async_transfer: bool = True,
        load_delay: float = 0.0,
    ):
        self.hot_budget = hot_budget
        self.load_delay = load_delay
        self._entries: dict[CacheKey, CacheEntry] = {}
        self._lock = threading.RLock()
        self._inflight: dict[CacheKey, threading.Event] = {}
        self._hot_bytes = 0
        self._cold_bytes = 0
        self._transfer_count = 0
        self._transfer_bytes = 0
        self._prefetch_hits = 0
        self._blocking_loads = 0
        self._evict_warnings = 0
        self._current_step = 0
        self._pool = BufferPool()
        self._read_file: _SpillFile | None = None
        self._write_path = spill_path
        self._write_file: _SpillFile | None = None
        self._owns_temp = False
        self._async = async_transfer
        self._queue: queue.Queue = queue.Queue()
        self._worker = None
        if async_transfer:
            self._worker = threading.Thread(target=self._transfer_loop, daemon=True)
            self._worker.start()

    @classmethod
    def open_spill(cls, path, **kwargs) -> "CacheStore":
        """Open a previously written spill file; all entries start cold.

        The original file is only ever read; evictions from this store go to
        a fresh overlay file.
        """
        store = cls(**kwargs)
        store._read_file = _SpillFile(path, "rb")
        for rec in _SpillFile.read_footer(path):
            key = CacheKey(rec["step"], rec["layer"], Role(rec["role"]))
            entry = CacheEntry(
                key=key,
                payload=None,
                bytes=rec["bytes"],
                tier="cold",
                compacted=rec.get("compacted", False),
                spill_offset=rec["offset"],
                spill_len=rec["length"],
                spill_in_read_file=True,
            )
            store._entries[key] = entry
            store._cold_bytes += entry.bytes
        return store

    # -- tier bookkeeping ---------------------------------------------------

    def _ensure_write_file(self) -> _SpillFile:
        with self._lock:
            if self._write_file is None:
                if self._write_path is None:
                    fd, path = tempfile.mkstemp(prefix="sparsedit-spill-", suffix=".bin")
                    os.close(fd)
                    self._write_path = path
                    self._owns_temp = True
                self._write_file = _SpillFile(self._write_path, "wb+")
            return self._write_file

    def set_current_step(self, step: int) -> None:
        with self._lock:
            self._current_step = step

    def _evict_order(self, e: CacheEntry):
        if e.key.step < self._current_step:
            return (0, 0, -e.bytes)
        return (1, -(e.key.step - self._current_step), -e.bytes)

    def evict(self) -> None:
        """Move hot entries cold until the budget holds (farthest step first)."""
        if self.hot_budget is None:
            return
        to_spill: list[CacheEntry] = []
        with self._lock:
            if self._hot_bytes <= self.hot_budget:
                return
            hot = sorted(
                (e for e in self._entries.values() if e.tier == "hot"),
                key=self._evict_order,
            )
            projected = self._hot_bytes
            for e in hot:
                if projected <= self.hot_budget:
                    break
                if e.bytes > self.hot_budget:
                    # entry can never fit the budget; keep it rather than thrash
                    self._evict_warnings += 1
                    continue
                e.tier = "spilling"
                to_spill.append(e)
                projected -= e.bytes
        for e in to_spill:
            if e.spill_offset is None:
                buf = _serialize_payload(e.payload)
                f = self._ensure_write_file()
                offset, length = f.append(e.key, buf)
                e.spill_offset, e.spill_len = offset, length
                e.spill_in_read_file = False
        with self._lock:
            for e in to_spill:
                e.tier = "cold"
                e.payload = None
                self._hot_bytes -= e.bytes
                self._cold_bytes += e.bytes
                self._transfer_count += 1
                self._transfer_bytes += e.bytes

    def _read_record(self, e: CacheEntry):
        f = self._read_file if e.spill_in_read_file else self._write_file
        if f is None or e.spill_offset is None:
            raise ContractViolation(f"cold entry {e.key} has no spill record")
        if self.load_delay > 0.0:
            threading.Event().wait(self.load_delay)
        return _deserialize_payload(f.read(e.spill_offset, e.spill_len))

    def _install_hot(self, key: CacheKey, payload, prefetched: bool) -> None:
        with self._lock:
            e = self._entries.get(key)
            if e is not None and e.tier == "cold":
                e.payload = payload
                e.tier = "hot"
                e.prefetched = prefetched
                self._cold_bytes -= e.bytes
                self._hot_bytes += e.bytes
                self._transfer_count += 1
                self._transfer_bytes += e.bytes
            ev = self._inflight.pop(key, None)
            if ev is not None:
                ev.set()
        self.evict()

    def _transfer_loop(self):
        while True:
            job = self._queue.get()
            try:
                if job is _STOP:
                    return
                with self._lock:
                    e = self._entries.get(job)
                    if e is None or e.tier != "cold":
                        ev = self._inflight.pop(job, None)
                        if ev is not None:
                            ev.set()
                        continue
                payload = self._read_record(e)
                self._install_hot(job, payload, prefetched=True)
            except Exception:
                # wake waiters; they will retry inline and surface the error
                with self._lock:
                    ev = self._inflight.pop(job, None)
                    if ev is not None:
                        ev.set()
            finally:
                self._queue.task_done()

    # -- public operations --------------------------------------------------

    def put(self, key, payload, overwrite: bool = False) -> None:
        key = _as_key(key)
        if not isinstance(payload, (np.ndarray, CompactTensor)):
            raise ContractViolation(f"unsupported payload type {type(payload)}")
        if isinstance(payload, np.ndarray) and payload.dtype != np.float32:
            raise ContractViolation(f"payloads must be float32, got {payload.dtype}")
        nbytes = _payload_nbytes(payload)
        with self._lock:
            existing = self._entries.get(key)
            if existing is not None:
                if not overwrite:
                    raise ContractViolation(f"key {key} already present (pass overwrite=True)")
                if existing.tier in ("hot", "spilling"):
                    self._hot_bytes -= existing.bytes
                else:
                    self._cold_bytes -= existing.bytes
            self._entries[key] = CacheEntry(key=key, payload=payload, bytes=nbytes, tier="hot")
            self._hot_bytes += nbytes
        self.evict()

    def get(self, key):
        key = _as_key(key)
        while True:
            with self._lock:
                e = self._entries.get(key)
                if e is None:
                    raise CacheMissError(key.step, key.layer_id, key.role.name.lower())
                if e.payload is not None:
                    if e.prefetched:
                        self._prefetch_hits += 1
                        e.prefetched = False
                    return e.payload
                ev = self._inflight.get(key)
                if ev is None:
                    ev = threading.Event()
                    self._inflight[key] = ev
                    self._blocking_loads += 1
                    owner = True
                else:
                    owner = False
            if owner:
                payload = self._read_record(e)
                self._install_hot(key, payload, prefetched=False)
                return payload
            ev.wait()
            with self._lock:
                e = self._entries.get(key)
                if e is not None and e.payload is not None:
                    if e.prefetched:
                        self._prefetch_hits += 1
                        e.prefetched = False
                    return e.payload
            # promotion raced with an eviction; retry

    def prefetch(self, step: int) -> None:
        """Schedule every cold entry of a step for background promotion."""
        jobs = []
        with self._lock:
            for key, e in self._entries.items():
                if key.step != step or e.tier != "cold" or key in self._inflight:
                    continue
                self._inflight[key] = threading.Event()
                jobs.append(key)
        if self._async:
            for key in jobs:
                self._queue.put(key)
        else:
            for key in jobs:
                with self._lock:
                    e = self._entries.get(key)
                    if e is None or e.tier != "cold":
                        ev = self._inflight.pop(key, None)
                        if ev is not None:
                            ev.set()
                        continue
                payload = self._read_record(e)
                self._install_hot(key, payload, prefetched=True)

    def contains(self, key) -> bool:
        with self._lock:
            return _as_key(key) in self._entries

    def keys(self) -> list[CacheKey]:
        with self._lock:
            return list(self._entries.keys())

    def compact(self, mask: BinaryMask) -> None:
        """Shrink layer-output/input entries to their mask-complement pixels.

        Norm statistics, attention maps, and step latents stay whole. An
        empty mask is a no-op: with no edit, everything is reusable and
        nothing will be recomputed.
        """
        if mask.is_empty():
            return
        with self._lock:
            targets = [e for e in self._entries.values() if e.key.role in COMPACTABLE_ROLES]
        for e in targets:
            if e.compacted:
                raise ContractViolation(f"entry {e.key} is already compacted")
        max_factor = 1
        for e in targets:
            payload = self.get(e.key)
            h, w = payload.shape[2], payload.shape[3]
            if mask.h % h != 0 or mask.w % w != 0 or mask.h // h != mask.w // w:
                raise ConfigError(f"entry {e.key} resolution {(h, w)} not derivable from mask {mask.shape}")
            factor = mask.h // h
            if factor & (factor - 1) != 0:
                raise ConfigError(f"entry {e.key} pool factor {factor} is not a power of two")
            max_factor = max(max_factor, factor)
        pyramid = build_pyramid(mask, max_factor.bit_length())
        for e in targets:
            payload = self.get(e.key)
            level = pyramid.level_for_shape(payload.shape[2], payload.shape[3])
            ct = compact_tensor(payload, pyramid.levels[level].bits)
            with self._lock:
                if e.tier in ("hot", "spilling"):
                    self._hot_bytes -= e.bytes
                else:
                    self._cold_bytes -= e.bytes
                e.payload = ct
                e.bytes = ct.nbytes
                e.tier = "hot"
                e.compacted = True
                e.spill_offset = None
                e.spill_in_read_file = False
                self._hot_bytes += e.bytes
        self.evict()

    def flush_all(self) -> None:
        """Spill every hot entry cold (used to persist a full generation)."""
        with self._lock:
            hot = [e for e in self._entries.values() if e.tier == "hot"]
            for e in hot:
                e.tier = "spilling"
        for e in hot:
            if e.spill_offset is None or e.spill_in_read_file:
                buf = _serialize_payload(e.payload)
                f = self._ensure_write_file()
                offset, length = f.append(e.key, buf)
                e.spill_offset, e.spill_len = offset, length
                e.spill_in_read_file = False
        with self._lock:
            for e in hot:
                e.tier = "cold"
                e.payload = None
                self._hot_bytes -= e.bytes
                self._cold_bytes += e.bytes
                self._transfer_count += 1
                self._transfer_bytes += e.bytes

    def drain(self) -> None:
        """Block until the transfer agent has finished every scheduled job.

        Makes transfer counters deterministic before a stats snapshot; a
        no-op in synchronous mode.
        """
        if self._async:
            self._queue.join()

    def acquire_buffer(self, shape) -> np.ndarray:
        return self._pool.acquire(shape)

    def release_buffer(self, buf: np.ndarray) -> None:
        self._pool.release(buf)

    @property
    def buffer_pool(self) -> BufferPool:
        return self._pool

    def stats(self) -> CacheStats:
        with self._lock:
            return CacheStats(
                hot_bytes=self._hot_bytes,
                cold_bytes=self._cold_bytes,
                total_bytes=self._hot_bytes + self._cold_bytes,
                transfer_count=self._transfer_count,
                transfer_bytes=self._transfer_bytes,
                prefetch_hits=self._prefetch_hits,
                blocking_loads=self._blocking_loads,
                pool_reuses=self._pool.reuses,
                pool_peak=self._pool.peak,
                evict_warnings=self._evict_warnings,
            )

    def hot_keys(self) -> set[CacheKey]:
        with self._lock:
            return {k for k, e in self._entries.items() if e.tier in ("hot", "spilling")}

    def close(self) -> None:
        """Stop the transfer agent and finalize the write spill file."""
        if self._worker is not None:
            self._queue.put(_STOP)
            self._worker.join(timeout=10.0)
            self._worker = None
        if self._write_file is not None:
            if self._owns_temp:
                self._write_file.close()
                os.unlink(self._write_path)
            else:
                index = []
                with self._lock:
                    for key, e in self._entries.items():
                        if e.spill_offset is None or e.spill_in_read_file:
                            continue
                        index.append(
                            {
                                "step": key.step,
                                "layer": key.layer_id,
                                "role": int(key.role),
                                "offset": e.spill_offset,
                                "length": e.spill_len,
                                "bytes": e.bytes,
                                "compacted": e.compacted,
                            }
                        )
                self._write_file.write_footer(index)
                self._write_file.close()
            self._write_file = None
        if self._read_file is not None:
            self._read_file.close()
            self._read_file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
