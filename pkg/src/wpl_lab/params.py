"""Named parameter arrays with per-model ownership.

Sharing is by identity: two models share a parameter when both membership
sets contain the same id.  Values are replaced, never mutated in place, by
the training code; snapshots hold read-only copies regardless.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import BinaryIO, Iterable, Mapping

import numpy as np

MAGIC = b"WPLSTORE"
VERSION = 1


class UnknownParamError(KeyError):
    pass


def _frozen_copy(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Snapshot:
    values: Mapping[str, np.ndarray]
    model_id: str | None = None
    epoch: int | None = None

    def __getitem__(self, pid: str) -> np.ndarray:
        return self.values[pid]

    def __contains__(self, pid) -> bool:
        return pid in self.values

    def keys(self):
        return self.values.keys()

    def differs_from(self, other: "Snapshot") -> set[str]:
        return {k for k in self.values if k in other.values and not np.array_equal(self.values[k], other.values[k])}


class ParameterStore:
    def __init__(self) -> None:
        self._values: dict[str, np.ndarray] = {}
        self._models: dict[str, frozenset[str]] = {}

    # --- values -------------------------------------------------------
    def add(self, pid: str, value) -> None:
        if pid in self._values:
            raise ValueError(f"parameter {pid!r} already exists")
        self._values[pid] = np.array(value, dtype=np.float64)

    def __getitem__(self, pid: str) -> np.ndarray:
        try:
            return self._values[pid]
        except KeyError:
            raise UnknownParamError(pid) from None

    def __setitem__(self, pid: str, value) -> None:
        old = self[pid]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise ValueError(f"{pid}: shape {value.shape} != {old.shape}")
        self._values[pid] = value

    def __contains__(self, pid) -> bool:
        return pid in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def ids(self) -> list[str]:
        return list(self._values)

    def values_for(self, pids: Iterable[str]) -> dict[str, np.ndarray]:
        return {p: self[p] for p in pids}

    # --- membership ---------------------------------------------------
    def register_model(self, model_id: str, param_ids: Iterable[str]) -> frozenset[str]:
        if model_id in self._models:
            raise ValueError(f"model {model_id!r} already registered")
        members = frozenset(param_ids)
        missing = sorted(members - self._values.keys())
        if missing:
            raise UnknownParamError(f"unknown parameters for {model_id}: {missing}")
        if not members:
            raise ValueError(f"model {model_id!r} has no parameters")
        self._models[model_id] = members
        return members

    def models(self) -> list[str]:
        return list(self._models)

    def members(self, model_id: str) -> frozenset[str]:
        return self._models[model_id]

    def shared(self, a: str, b: str) -> frozenset[str]:
        return self._models[a] & self._models[b]

    def private(self, model_id: str, other: str | None = None) -> frozenset[str]:
        """Parameters of ``model_id`` not used by ``other`` (or by any other model)."""
        mine = self._models[model_id]
        others = [other] if other is not None else [m for m in self._models if m != model_id]
        used = frozenset().union(*(self._models[m] for m in others)) if others else frozenset()
        return mine - used

    # --- snapshots ----------------------------------------------------
    def snapshot(self, param_ids: Iterable[str] | None = None, model_id=None, epoch=None) -> Snapshot:
        pids = self.ids() if param_ids is None else list(param_ids)
        return Snapshot(MappingProxyType({p: _frozen_copy(self[p]) for p in pids}), model_id, epoch)

    def restore(self, snap: Snapshot) -> None:
        for pid, val in snap.values.items():
            self[pid] = np.array(val)

    # --- binary io ----------------------------------------------------
    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            write_records(fh, self._values)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValueError(f"{path}: not a parameter store (bad magic)")
        (version,) = struct.unpack_from("<I", data, 8)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        records, end = read_records(data, 12)
        if end != len(data):
            raise ValueError(f"{path}: trailing bytes after last record")
        store = cls()
        for pid, arr in records.items():
            store.add(pid, arr)
        return store


def take_snapshot(store: ParameterStore, param_ids: Iterable[str], model_id=None, epoch=None) -> Snapshot:
    return store.snapshot(param_ids, model_id=model_id, epoch=epoch)


def register_model(store: ParameterStore, model_id: str, param_ids: Iterable[str]) -> frozenset[str]:
    return store.register_model(model_id, param_ids)


# Record layout: u32 id length, id bytes (utf-8), u32 rank, rank x u64 dims,
# prod(dims) x f64 data; all little-endian.
def write_records(fh: BinaryIO, values: Mapping[str, np.ndarray], counted: bool = False) -> None:
    if counted:
        fh.write(struct.pack("<Q", len(values)))
    for pid, arr in values.items():
        key = pid.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        fh.write(struct.pack("<I", len(key)))
        fh.write(key)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_records(data: bytes, offset: int, count: int | None = None) -> tuple[dict[str, np.ndarray], int]:
    out: dict[str, np.ndarray] = {}
    try:
        while offset < len(data) if count is None else len(out) < count:
            (klen,) = struct.unpack_from("<I", data, offset)
            offset += 4
            pid = data[offset : offset + klen].decode("utf-8")
            offset += klen
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", data, offset)
            offset += 8 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if offset + 8 * n > len(data):
                raise ValueError("truncated record")
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(dims)
            offset += 8 * n
            if pid in out:
                raise ValueError(f"duplicate record {pid!r}")
            out[pid] = arr
    except struct.error as exc:
        raise ValueError(f"truncated parameter records: {exc}") from None
    return out, offset
