"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a float32 (or float64, for gradient-check mode) numpy
array. While a tape is active (see ``record``), every operation in
``derain.ops`` appends one node to it; ``backward`` replays the tape in
reverse recording order exactly once and accumulates a gradient for every
leaf tensor that requires one.

The tape is single-writer: one recording stream per training step. Ops
never mutate their inputs, so inference on shared parameters is safe from
multiple threads as long as no tape is active.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of its documented range."""


class Tensor:
    """Dense n-dimensional array of real scalars, row-major."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation: output, inputs and the gradient rule."""

    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Recorded operations in topological (recording) order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_ACTIVE_TAPES = []


class record:
    """Context manager that activates a fresh tape for recording."""

    def __enter__(self):
        tape = Tape()
        _ACTIVE_TAPES.append(tape)
        return tape

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.pop()
        return False


def active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def tape_put(out, inputs, bwd):
    """Record one op node if a tape is active and any input needs a gradient.

    ``bwd`` maps the output gradient array to a tuple of input gradient
    arrays aligned with ``inputs`` (entries may be None).
    """
    tape = active_tape()
    if tape is None:
        return
    if not any(t.requires_grad for t in inputs):
        return
    out.requires_grad = True
    out.is_leaf = False
    tape.nodes.append(Node(out, inputs, bwd))


def backward(tape, loss):
    """Accumulate gradients of a scalar loss over a recorded tape.

    Returns a dict mapping every leaf tensor with ``requires_grad`` to its
    gradient array; the same array is also stored on ``tensor.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {loss.shape}")
    # id -> [tensor, grad, owned]; "owned" marks grads safe to accumulate
    # into in place (aliases of forward buffers are copied on first add).
    slots = {id(loss): [loss, np.ones(loss.data.shape, loss.data.dtype), True]}
    for node in reversed(tape.nodes):
        entry = slots.pop(id(node.out), None)
        if entry is None:
            continue
        gins = node.bwd(entry[1])
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            slot = slots.get(id(t))
            if slot is None:
                slots[id(t)] = [t, g, False]
            elif slot[2]:
                slot[1] += g
            else:
                slot[1] = slot[1] + g
                slot[2] = True
    grads = {}
    for t, g, _ in slots.values():
        if t.is_leaf and t.requires_grad:
            t.grad = g
            grads[t] = g
    return grads
