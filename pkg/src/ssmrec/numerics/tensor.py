"""Dense arrays with tape-based reverse-mode gradients and allocation tracking.

A :class:`Tensor` wraps an immutable numpy array. Operations in
:mod:`ssmrec.numerics.ops` record a backward closure on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient. Outside a tape
nothing is recorded, so inference keeps no intermediate buffers alive.

Every Tensor that owns its buffer reports the buffer size to the global
:data:`TRACKER`; the tracker's high-water mark is the package-wide definition
of "peak memory".
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import MemoryLimitExceeded, ShapeError

DEFAULT_DTYPE = np.float64


class MemoryTracker:
    """Counts live tracked bytes and their high-water mark."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0
        self.limit: int | None = None

    def alloc(self, nbytes: int) -> None:
        if nbytes <= 0:
            return
        if self.limit is not None and self.live + nbytes > self.limit:
            raise MemoryLimitExceeded(
                f"allocation of {nbytes} bytes exceeds limit {self.limit} "
                f"({self.live} bytes live)"
            )
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def free(self, nbytes: int) -> None:
        if nbytes > 0:
            self.live -= nbytes

    def reset_peak(self) -> None:
        self.peak = self.live

    @contextmanager
    def scratch(self, nbytes: int):
        """Account for a temporary working buffer for the duration of the block."""
        self.alloc(nbytes)
        try:
            yield
        finally:
            self.free(nbytes)

    @contextmanager
    def limited(self, limit: int | None):
        previous = self.limit
        self.limit = limit
        try:
            yield self
        finally:
            self.limit = previous


TRACKER = MemoryTracker()


def peak_bytes() -> int:
    return TRACKER.peak


def reset_peak() -> None:
    TRACKER.reset_peak()


class Tensor:
    """Immutable dense array node.

    Broadcasting follows numpy rules for elementwise binary operations; the
    gradient of a broadcast operand is summed back to its own shape. Every
    other operation requires exact shapes.
    """

    __slots__ = ("data", "requires_grad", "name", "_nbytes", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        nbytes = arr.nbytes if arr.base is None else 0
        self._nbytes = 0
        TRACKER.alloc(nbytes)
        self._nbytes = nbytes
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    def __del__(self):
        TRACKER.free(self._nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return _ops().swapaxes(self, a, b)


def _ops():
    from . import ops

    return ops


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype if dtype is not None else None, copy=True),
                  requires_grad=True, name=name)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Records primitive operations in execution order for one backward pass.

    Usage::

        with Tape() as tape:
            loss = model_loss(params)
        grads = tape.gradient(loss, params)

    The tape is single-use: :meth:`gradient` consumes the recorded nodes.
    """

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple, Backward]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def gradient(self, target: Tensor, params: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``target`` with respect to ``params``.

        ``target`` must be a scalar unless ``seed`` (the upstream gradient)
        is supplied. Parameters the target does not depend on receive exact
        zeros.
        """
        if seed is None:
            if target.size != 1:
                raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
            seed = np.ones_like(target.data)
        seed = np.asarray(seed, dtype=target.dtype)
        if seed.shape != target.shape:
            raise ShapeError(f"seed shape {seed.shape} != target shape {target.shape}")
        keep = {id(p) for p in params}
        grads: dict[int, np.ndarray] = {id(target): seed}
        TRACKER.alloc(seed.nbytes)
        try:
            for out, inputs, backward in reversed(self.nodes):
                key = id(out)
                g = grads.get(key)
                if g is None:
                    continue
                if key not in keep:
                    del grads[key]
                    TRACKER.free(g.nbytes)
                in_grads = backward(g)
                for inp, gi in zip(inputs, in_grads):
                    if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                        continue
                    if gi.shape != inp.shape:
                        raise ShapeError(
                            f"backward produced gradient of shape {gi.shape} for input {inp.shape}"
                        )
                    k = id(inp)
                    prev = grads.get(k)
                    if prev is None:
                        gi = np.array(gi, dtype=inp.dtype, copy=True)
                        grads[k] = gi
                        TRACKER.alloc(gi.nbytes)
                    else:
                        prev += gi
            return [
                grads[id(p)] if id(p) in grads else np.zeros_like(p.data)
                for p in params
            ]
        finally:
            for g in grads.values():
                TRACKER.free(g.nbytes)
            self.nodes.clear()


def record(out: Tensor, inputs: tuple, backward: Backward) -> Tensor:
    """Attach ``backward`` to ``out`` on the active tape if any input needs it."""
    tape = Tape.active()
    if tape is None:
        return out
    if any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
        out.requires_grad = True
        tape.nodes.append((out, inputs, backward))
    return out
