"""Dense float64 tensors with a reverse-mode tape.

Ops record onto the innermost active :class:`Tape` whenever at least one
input has ``grad_enabled``. Outside a tape every op is a plain numpy
computation, which is what inference uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from gear.errors import ContractError, DimensionError, NumericError

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad_enabled", "node", "grad", "name", "__weakref__")

    def __init__(self, data, grad_enabled: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad_enabled = grad_enabled
        self.node: Node | None = None
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tape_id(self) -> int | None:
        return None if self.node is None else self.node.index

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, grad_enabled: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, grad_enabled=grad_enabled, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    index: int = -1
    tape: "Tape | None" = field(default=None, repr=False)


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable ops; inputs always precede outputs."""

    nodes: list[Node] = field(default_factory=list)
    gradients: dict = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.grad_enabled for t in inputs)
    out = Tensor(out_data, grad_enabled=needs)
    if needs:
        node = Node(kind, inputs, out, backward, index=len(tape.nodes), tape=tape)
        tape.nodes.append(node)
        out.node = node
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    gate = x.data > 0
    # np.maximum keeps NaN visible to the finiteness checks downstream
    return _record("relu", (x,), np.maximum(x.data, 0.0), lambda g: (g * gate,))


def abs_(x: Tensor) -> Tensor:
    # np.sign(0) == 0 fixes the subgradient at the kink
    sign = np.sign(x.data)
    return _record("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def softplus(x: Tensor) -> Tensor:
    """ln(1 + exp(x)) without overflow."""
    xd = x.data
    out = np.logaddexp(0.0, xd)
    sig = np.exp(xd - out)
    return _record("softplus", (x,), out, lambda g: (g * sig,))


# -- linear algebra / shape --------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.transpose(x.data, axes),
                   lambda g: (np.transpose(g, inv),))


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("concat_last needs at least one tensor")
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last leading dims differ: {xs[0].shape} vs {x.shape}")
    widths = [x.shape[-1] for x in xs]
    cuts = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _record("concat", tuple(xs), np.concatenate([x.data for x in xs], axis=-1), backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise DimensionError(f"stack shapes differ: {xs[0].shape} vs {x.shape}")
    n = len(xs)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record("stack", tuple(xs), np.stack([x.data for x in xs], axis=axis), backward)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; the backward scatter-adds."""
    idx = np.asarray(index, dtype=np.int64)
    src = x.shape

    def backward(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take_rows", (x,), x.data[idx], backward)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    src = x.shape
    if axis is None:
        return _record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % len(src)
    return _record("sum", (x,), x.data.sum(axis=ax),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    xd = x.data
    if xd.shape[-1] < 1:
        raise DimensionError("row_softmax needs at least one column")
    if not np.all(np.isfinite(xd)):
        raise NumericError("row_softmax received non-finite input")
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    s = z / z.sum(axis=-1, keepdims=True)
    return _record("softmax", (x,), s,
                   lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def stop_gradient(x: Tensor) -> Tensor:
    """Cut the tape edge: the value passes through, no gradient flows back.

    When a gradient check is replaying frozen values (see ``gradcheck``), the
    recorded value from the reference evaluation is returned instead so that
    finite differences see the same constant the analytic pass saw.
    """
    data = x.data
    if _FREEZER is not None:
        data = _FREEZER.visit(data)
    tape = active_tape()
    out = Tensor(data, grad_enabled=False)
    if tape is not None and x.grad_enabled:
        node = Node("stop_gradient", (x,), out, None, index=len(tape.nodes), tape=tape)
        tape.nodes.append(node)
        out.node = node
    return out


class _Freezer:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.cursor = 0
        self.recording = True

    def visit(self, data: np.ndarray) -> np.ndarray:
        if self.recording:
            self.values.append(data.copy())
            return data
        if self.cursor >= len(self.values):
            raise ContractError("frozen replay visited more stop_gradient sites than recorded")
        value = self.values[self.cursor]
        self.cursor += 1
        return value


_FREEZER: _Freezer | None = None


def detach(x: Tensor) -> np.ndarray:
    """Return the numpy value of ``x`` as a constant (frozen under replay)."""
    return stop_gradient(x).data


# -- backward ----------------------------------------------------------------

def backward(root: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar root.

    Returns a map from every grad-enabled ancestor of ``root`` (leaves and
    intermediates) to its gradient. Leaves also get ``.grad`` set.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.grad_enabled:
        raise ContractError("backward root is not grad-enabled")
    if tape is None:
        if root.node is None:
            raise ContractError("root has no tape node")
        tape = root.node.tape
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    keep: dict[int, Tensor] = {id(root): root}
    stop = root.node.index if root.node is not None else -1
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.get(id(node.output))
        if g is None or node.backward is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.grad_enabled:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                keep[key] = inp
    result = {keep[k]: v for k, v in grads.items()}
    for t, g in result.items():
        if t.node is None:
            t.grad = g
    tape.gradients = result
    return result


def zeros(shape, grad_enabled: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), grad_enabled=grad_enabled)


def ones(shape, grad_enabled: bool = False) -> Tensor:
    return Tensor(np.ones(shape), grad_enabled=grad_enabled)

