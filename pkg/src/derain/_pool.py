"""Recycling allocator for operation outputs and gradient buffers.

The training tape keeps every activation alive until backward, so plain
malloc keeps mapping fresh pages each iteration (page-fault churn costs
far more than the arithmetic at desk scale). Shapes repeat exactly across
iterations, so buffers are recycled instead: a buffer is handed out again
once its refcount shows no live views (numpy collapses view bases to the
root buffer, so the root's refcount tracks all descendants).

Set DERAIN_POOL=0 to fall back to plain numpy allocation.
"""

import os
import sys

import numpy as np

_GRAIN = 4096  # round sizes up to reduce the number of size classes


class BufferPool:
    def __init__(self):
        self.classes = {}  # rounded nbytes -> [cursor, list of uint8 root buffers]

    def take(self, shape, dtype=np.float32):
        """Uninitialized array of the requested shape; contents arbitrary."""
        shape = tuple(int(s) for s in shape)
        dt = np.dtype(dtype)
        nbytes = dt.itemsize
        for s in shape:
            nbytes *= s
        key = -(-nbytes // _GRAIN) * _GRAIN if nbytes else _GRAIN
        entry = self.classes.get(key)
        if entry is None:
            entry = [0, []]
            self.classes[key] = entry
        bufs = entry[1]
        n = len(bufs)
        # Circular scan from the cursor: allocation order repeats across
        # iterations, so in steady state the first probe hits a free buffer.
        start = entry[0]
        for i in range(n):
            j = start + i
            if j >= n:
                j -= n
            buf = bufs[j]
            # refs: list slot, local, getrefcount argument
            if sys.getrefcount(buf) == 3:
                entry[0] = j + 1 if j + 1 < n else 0
                return buf[:nbytes].view(dt).reshape(shape)
        buf = np.empty(key, dtype=np.uint8)
        bufs.append(buf)
        entry[0] = 0
        return buf[:nbytes].view(dt).reshape(shape)

    def zeros(self, shape, dtype=np.float32):
        out = self.take(shape, dtype)
        out.fill(0)
        return out

    def trim(self):
        """Drop every currently-unreferenced buffer."""
        for entry in self.classes.values():
            entry[1] = [b for b in entry[1] if sys.getrefcount(b) > 3]
            entry[0] = 0


class _PlainAlloc:
    @staticmethod
    def take(shape, dtype=np.float32):
        return np.empty(shape, dtype)

    @staticmethod
    def zeros(shape, dtype=np.float32):
        return np.zeros(shape, dtype)

    @staticmethod
    def trim():
        pass


if os.environ.get("DERAIN_POOL", "1") == "0":
    pool = _PlainAlloc()
else:
    pool = BufferPool()

if os.environ.get("DERAIN_POOL_POISON"):  # debug: catch stale-buffer reads
    _orig_take = pool.take

    def _poisoned_take(shape, dtype=np.float32):
        out = _orig_take(shape, dtype)
        if out.dtype.kind == "f":
            out.fill(np.nan)
        else:
            out.fill(1)
        return out

    pool.take = _poisoned_take
