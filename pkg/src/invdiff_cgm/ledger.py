"""Byte accounting for tensors saved for the backward pass."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

TAGS = ("step-state", "boundary-cache", "module-internal")


def _arrays(obj):
    if isinstance(obj, np.ndarray):
        yield obj
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _arrays(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _arrays(v)


def _owner(a: np.ndarray) -> np.ndarray:
    while isinstance(a.base, np.ndarray):
        a = a.base
    return a


def nbytes(obj) -> int:
    """Bytes held by the distinct buffers reachable from ``obj``."""
    seen = {}
    for a in _arrays(obj):
        o = _owner(a)
        seen[id(o)] = o.nbytes
    return sum(seen.values())


class MemoryLedger:
    """Registry of live saved-for-backward buffers with a running peak.

    Buffers are deduplicated by their owning allocation, so a view and its
    base, or the same array saved by two layers, count once. The ledger
    keeps references to what it tracks until release.
    """

    def __init__(self):
        self._refs = {}  # id(owner) -> [owner, refcount, tag]
        self._handles = {}
        self._next = 0
        self.live_bytes = 0
        self.peak_bytes = 0
        self.by_tag = defaultdict(int)
        self.peak_by_tag = defaultdict(int)

    def register(self, tag: str, obj) -> int:
        owners = {}
        for a in _arrays(obj):
            o = _owner(a)
            owners[id(o)] = o
        for key, o in owners.items():
            entry = self._refs.get(key)
            if entry is None:
                self._refs[key] = [o, 1, tag]
                self.live_bytes += o.nbytes
                self.by_tag[tag] += o.nbytes
            else:
                entry[1] += 1
        h = self._next
        self._next += 1
        self._handles[h] = list(owners)
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
            self.peak_by_tag = defaultdict(int, self.by_tag)
        return h

    def release(self, handle: int) -> None:
        for key in self._handles.pop(handle):
            entry = self._refs[key]
            entry[1] -= 1
            if entry[1] == 0:
                del self._refs[key]
                self.live_bytes -= entry[0].nbytes
                self.by_tag[entry[2]] -= entry[0].nbytes

    @property
    def open_handles(self) -> int:
        return len(self._handles)

    def reset_peak(self) -> None:
        self.peak_bytes = self.live_bytes
        self.peak_by_tag = defaultdict(int, self.by_tag)

    def report(self) -> dict:
        return {
            "live_bytes": int(self.live_bytes),
            "peak_bytes": int(self.peak_bytes),
            "peak_by_tag": {k: int(v) for k, v in sorted(self.peak_by_tag.items()) if v},
        }


class NullLedger(MemoryLedger):
    """Ledger that tracks nothing; used when no accounting is wanted."""

    def register(self, tag, obj):
        return -1

    def release(self, handle):
        pass
