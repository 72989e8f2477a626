"""Diagonal Fisher buffer over shared parameters, plus its anchor snapshot."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

from .params import Snapshot, read_records, write_records

MAGIC = b"WPLFISHR"
VERSION = 1


def fisher_from_gradients(grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for pid, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {pid}")
        out[pid] = g * g
    return out


def empirical_fisher(
    grad_fn: Callable[[np.ndarray, np.ndarray], Mapping[str, np.ndarray]],
    inputs: np.ndarray,
    targets: np.ndarray,
    batch_size: int = 1,
    keys=None,
) -> dict[str, np.ndarray]:
    """Average of squared mini-batch gradients over a held-out set.

    With ``batch_size=1`` this is the per-sample empirical Fisher, which stays
    informative at a converged solution where the full-batch gradient vanishes.
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("empty sample for Fisher estimate")
    total: dict[str, np.ndarray] = {}
    batches = 0
    for start in range(0, n, batch_size):
        g = grad_fn(inputs[start : start + batch_size], targets[start : start + batch_size])
        if keys is not None:
            g = {k: g[k] for k in keys}
        for pid, sq in fisher_from_gradients(g).items():
            total[pid] = total[pid] + sq if pid in total else sq
        batches += 1
    return {pid: v / batches for pid, v in total.items()}


@dataclass
class FisherState:
    """Single global Fisher buffer.

    ``F`` only ever receives squares and convex combinations of nonnegative
    arrays, so it stays nonnegative.
    """

    eta: float = 0.9
    flush_period: int = 3
    last_flush_epoch: int = 0
    F: dict[str, np.ndarray] = field(default_factory=dict)
    anchor: Snapshot | None = None

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.flush_period < 1:
            raise ValueError("flush_period must be a positive number of epochs")

    def momentum_update(self, fresh: Mapping[str, np.ndarray]) -> "FisherState":
        """``F <- (1 - eta) F + eta fresh`` for every id in ``fresh``; other ids keep their value."""
        for pid, new in fresh.items():
            new = np.asarray(new, dtype=np.float64)
            if np.any(new < 0):
                raise ValueError(f"negative Fisher contribution for {pid}")
            old = self.F.get(pid)
            if old is None:
                old = np.zeros_like(new)
            elif old.shape != new.shape:
                raise ValueError(f"{pid}: shape {new.shape} != {old.shape}")
            self.F[pid] = (1.0 - self.eta) * old + self.eta * new
        return self

    def replace(self, fresh: Mapping[str, np.ndarray]) -> "FisherState":
        """Single-shot estimate (two-model setting): overwrite without momentum."""
        self.F = {pid: np.array(v, dtype=np.float64) for pid, v in fresh.items()}
        return self

    def maybe_flush(self, epoch: int) -> bool:
        """Zero the buffer when ``flush_period`` epochs have passed; returns whether it fired."""
        if epoch < self.last_flush_epoch:
            raise ValueError(f"epoch {epoch} precedes last flush at {self.last_flush_epoch}")
        if epoch - self.last_flush_epoch < self.flush_period:
            return False
        for pid in self.F:
            self.F[pid] = np.zeros_like(self.F[pid])
        self.last_flush_epoch = epoch
        return True

    def set_anchor(self, snap: Snapshot) -> "FisherState":
        missing = sorted(k for k in self.F if k not in snap)
        if missing:
            raise KeyError(f"anchor snapshot does not cover {missing}")
        self.anchor = snap
        return self

    def get(self, pid: str, like: np.ndarray | None = None) -> np.ndarray:
        if pid in self.F:
            return self.F[pid]
        if like is None:
            raise KeyError(pid)
        return np.zeros_like(like, dtype=np.float64)

    # --- binary io ----------------------------------------------------
    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<dIq", self.eta, self.flush_period, self.last_flush_epoch))
            write_records(fh, self.F, counted=True)
            anchor = {} if self.anchor is None else dict(self.anchor.values)
            fh.write(struct.pack("<B", self.anchor is not None))
            write_records(fh, anchor, counted=True)

    @classmethod
    def load(cls, path) -> "FisherState":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValueError(f"{path}: not a Fisher state file (bad magic)")
        (version,) = struct.unpack_from("<I", data, 8)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        eta, period, last = struct.unpack_from("<dIq", data, 12)
        off = 12 + struct.calcsize("<dIq")
        (n,) = struct.unpack_from("<Q", data, off)
        F, off = read_records(data, off + 8, count=n)
        (has_anchor,) = struct.unpack_from("<B", data, off)
        (n,) = struct.unpack_from("<Q", data, off + 1)
        anchor, off = read_records(data, off + 9, count=n)
        if off != len(data):
            raise ValueError(f"{path}: trailing bytes")
        state = cls(eta=eta, flush_period=period, last_flush_epoch=last, F=F)
        if has_anchor:
            for v in anchor.values():
                v.flags.writeable = False
            state.anchor = Snapshot(MappingProxyType(anchor))
        return state


def momentum_update(state: FisherState, fresh) -> FisherState:
    return state.momentum_update(fresh)


def maybe_flush(state: FisherState, epoch: int) -> bool:
    return state.maybe_flush(epoch)


def set_anchor(state: FisherState, snap: Snapshot) -> FisherState:
    return state.set_anchor(snap)
