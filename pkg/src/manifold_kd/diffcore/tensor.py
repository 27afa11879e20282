"""Dense tensors and the tape that records primitive applications."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NonFinite, NotScalar, TapeConsumed

_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array, optionally tracked for reverse-mode differentiation.

    Leaves created by the user carry ``requires_grad``; after
    :func:`backward` their ``grad`` holds the accumulated gradient.
    """

    __slots__ = ("value", "requires_grad", "grad", "name", "_tape")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all of these dispatch to primitives in ops
    def __add__(self, other):
        from . import ops
        return ops.add_scalar(self, other) if np.isscalar(other) else ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add_scalar(self, -other) if np.isscalar(other) else ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add_scalar(ops.scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.scalar_mul(self, other) if np.isscalar(other) else ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.scalar_mul(self, 1.0 / other) if np.isscalar(other) else ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scalar_mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives evaluated inside record themselves
    when any input requires a gradient.  A tape can run backward once.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        if self._consumed:
            raise TapeConsumed("cannot record on a tape that already ran backward")
        out._tape = self
        self._nodes.append((out, tuple(inputs), vjp))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeConsumed("backward already ran on this tape")
        if loss.size != 1:
            raise NotScalar(f"loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        if loss._tape is not self and loss.requires_grad:
            leaves[id(loss)] = (loss, grads[id(loss)])
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._tape is self:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    prev = leaves.get(key)
                    leaves[key] = (inp, gi if prev is None else prev[1] + gi)
        self._nodes.clear()
        for leaf, g in leaves.values():
            if not np.all(np.isfinite(g)):
                raise NonFinite(f"non-finite gradient for {leaf!r}")
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise NotScalar(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeConsumed("loss was not produced on a tape")
    loss._tape.backward(loss)
