"""Small dense-tensor autodiff engine on top of numpy.

Two evaluation modes share one closed set of primitives:

* reverse mode: leaves are registered on a :class:`Tape`; every primitive
  applied to a taped :class:`Tensor` appends a node, and :func:`backward`
  walks the nodes in reverse order.
* forward mode: :func:`jvp` wraps inputs in :class:`DualTensor` and pushes
  tangents through the same primitives.

Plain ``numpy.ndarray`` inputs are constants: they get no tape node and a
zero tangent. Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "NonFiniteError",
    "Tensor",
    "DualTensor",
    "Tape",
    "backward",
    "jvp",
    "primitive_set",
    "value",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "square",
    "concat",
    "sigmoid",
    "tanh",
    "relu",
    "silu",
    "sin",
    "cos",
    "add_bias",
    "stopgrad",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


@dataclass(eq=False)
class Tensor:
    """Array recorded on a tape."""

    data: np.ndarray
    tape: "Tape"
    index: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.index})"


@dataclass(eq=False)
class DualTensor:
    """Primal value paired with a tangent of the same shape."""

    primal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        if self.primal.shape != self.tangent.shape:
            raise ValueError(
                f"primal shape {self.primal.shape} != tangent shape {self.tangent.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.primal.shape


@dataclass
class _Node:
    prim: "_Primitive | None"  # None for leaves
    inputs: tuple[int | None, ...]
    ctx: Any
    name: str | None = None


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as they are created, so the list is always in
    topological order.
    """

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[str, int] = field(default_factory=dict)

    def watch(self, name: str, array) -> Tensor:
        if name in self.leaves:
            raise ValueError(f"leaf {name!r} already on tape")
        data = np.array(array, dtype=np.float64)
        # leaf nodes keep their value as ctx so the tape can be replayed
        self.nodes.append(_Node(None, (), data, name))
        self.leaves[name] = len(self.nodes) - 1
        return Tensor(data, self, len(self.nodes) - 1)

    def _record(self, prim, inputs, ctx, data) -> Tensor:
        self.nodes.append(_Node(prim, inputs, ctx))
        return Tensor(data, self, len(self.nodes) - 1)

    def replay(self, leaf_values: dict[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node's forward value from the leaves."""
        leaf_values = leaf_values or {}
        values: list[np.ndarray | None] = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.prim is None:
                values[i] = np.asarray(leaf_values.get(node.name, node.ctx), dtype=np.float64)
                continue
            args = [values[j] if j is not None else c
                    for j, c in zip(node.inputs, node.ctx["consts"])]
            values[i] = node.prim.fwd(*args, **node.ctx["kw"])[0]
        return values


def value(x) -> np.ndarray:
    """Underlying array of a Tensor, the primal of a DualTensor, or the array itself."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, DualTensor):
        return x.primal
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class _Primitive:
    def __init__(self, name: str, fwd, vjp, jvp):
        self.name = name
        self.fwd = fwd  # (*arrays, **kw) -> (out, saved)
        self.vjp = vjp  # (g, saved) -> tuple of input cotangents (None = zero)
        self.jvp = jvp  # (tangents, saved) -> out tangent; tangents entries may be None

    def __repr__(self) -> str:
        return f"<primitive {self.name}>"


_PRIMITIVES: dict[str, _Primitive] = {}


def _primitive(name):
    def register(cls):
        _PRIMITIVES[name] = _Primitive(name, cls.fwd, cls.vjp, cls.jvp)
        return _PRIMITIVES[name]
    return register


def _apply(prim: _Primitive, inputs: Sequence, **kw):
    tapes = {id(x.tape): x.tape for x in inputs if isinstance(x, Tensor)}
    has_dual = any(isinstance(x, DualTensor) for x in inputs)
    if tapes and has_dual:
        raise TypeError("cannot mix taped Tensors and DualTensors in one primitive")
    if len(tapes) > 1:
        raise ValueError("inputs belong to different tapes")
    arrays = [value(x) for x in inputs]
    # overflow is reported through NonFiniteError below, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        out, saved = prim.fwd(*arrays, **kw)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output from primitive {prim.name!r}")
    if has_dual:
        tangents = [x.tangent if isinstance(x, DualTensor) else None for x in inputs]
        t = prim.jvp(tangents, saved)
        t = np.zeros_like(out) if t is None else np.broadcast_to(t, out.shape).copy()
        return DualTensor(out, t)
    if tapes:
        tape = next(iter(tapes.values()))
        idx = tuple(x.index if isinstance(x, Tensor) else None for x in inputs)
        consts = tuple(None if isinstance(x, Tensor) else a for x, a in zip(inputs, arrays))
        return tape._record(prim, idx, {"saved": saved, "consts": consts, "kw": kw}, out)
    return out


def _tsum(*terms):
    terms = [t for t in terms if t is not None]
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# primitives


@_primitive("matmul")
class _MatMul:
    @staticmethod
    def fwd(a, b):
        return a @ b, (a, b)

    @staticmethod
    def vjp(g, saved):
        a, b = saved
        return g @ b.T, a.T @ g

    @staticmethod
    def jvp(ts, saved):
        a, b = saved
        ta, tb = ts
        return _tsum(None if ta is None else ta @ b, None if tb is None else a @ tb)


@_primitive("add")
class _Add:
    @staticmethod
    def fwd(a, b):
        return a + b, (a.shape, b.shape)

    @staticmethod
    def vjp(g, saved):
        return _unbroadcast(g, saved[0]), _unbroadcast(g, saved[1])

    @staticmethod
    def jvp(ts, saved):
        return _tsum(*ts)


@_primitive("sub")
class _Sub:
    @staticmethod
    def fwd(a, b):
        return a - b, (a.shape, b.shape)

    @staticmethod
    def vjp(g, saved):
        return _unbroadcast(g, saved[0]), -_unbroadcast(g, saved[1])

    @staticmethod
    def jvp(ts, saved):
        ta, tb = ts
        return _tsum(ta, None if tb is None else -tb)


@_primitive("mul")
class _Mul:
    @staticmethod
    def fwd(a, b):
        return a * b, (a, b)

    @staticmethod
    def vjp(g, saved):
        a, b = saved
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    @staticmethod
    def jvp(ts, saved):
        a, b = saved
        ta, tb = ts
        return _tsum(None if ta is None else ta * b, None if tb is None else a * tb)


@_primitive("scale")
class _Scale:
    @staticmethod
    def fwd(a, c):
        return c * a, c

    @staticmethod
    def vjp(g, c):
        return (c * g,)

    @staticmethod
    def jvp(ts, c):
        return None if ts[0] is None else c * ts[0]


@_primitive("sum")
class _Sum:
    @staticmethod
    def fwd(a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)

    @staticmethod
    def vjp(g, saved):
        shape, axis, keepdims = saved
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    @staticmethod
    def jvp(ts, saved):
        _, axis, keepdims = saved
        return None if ts[0] is None else np.sum(ts[0], axis=axis, keepdims=keepdims)


@_primitive("mean")
class _Mean:
    @staticmethod
    def fwd(a, axis=None, keepdims=False):
        n = a.size if axis is None else a.shape[axis]
        return np.mean(a, axis=axis, keepdims=keepdims), (a.shape, axis, keepdims, n)

    @staticmethod
    def vjp(g, saved):
        shape, axis, keepdims, n = saved
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    @staticmethod
    def jvp(ts, saved):
        _, axis, keepdims, _ = saved
        return None if ts[0] is None else np.mean(ts[0], axis=axis, keepdims=keepdims)


@_primitive("square")
class _Square:
    @staticmethod
    def fwd(a):
        return a * a, a

    @staticmethod
    def vjp(g, a):
        return (2.0 * a * g,)

    @staticmethod
    def jvp(ts, a):
        return None if ts[0] is None else 2.0 * a * ts[0]


@_primitive("concat")
class _Concat:
    @staticmethod
    def fwd(*arrays, axis=-1):
        sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis), (sizes, axis)

    @staticmethod
    def vjp(g, saved):
        sizes, axis = saved
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    @staticmethod
    def jvp(ts, saved):
        if all(t is None for t in ts):
            return None
        sizes, axis = saved
        ref = next(t for t in ts if t is not None)
        blocks = []
        for t, n in zip(ts, sizes):
            if t is None:
                shape = list(ref.shape)
                shape[axis] = n
                t = np.zeros(shape)
            blocks.append(t)
        return np.concatenate(blocks, axis=axis)


def _elementwise(name, f, df):
    class _E:
        @staticmethod
        def fwd(a):
            out = f(a)
            return out, (a, out)

        @staticmethod
        def vjp(g, saved):
            return (g * df(*saved),)

        @staticmethod
        def jvp(ts, saved):
            return None if ts[0] is None else ts[0] * df(*saved)

    _primitive(name)(_E)


_elementwise("sigmoid", expit, lambda a, s: s * (1.0 - s))
_elementwise("tanh", np.tanh, lambda a, y: 1.0 - y * y)
_elementwise("relu", lambda a: np.maximum(a, 0.0), lambda a, y: (a > 0).astype(np.float64))
_elementwise("sin", np.sin, lambda a, y: np.cos(a))
_elementwise("cos", np.cos, lambda a, y: -np.sin(a))


def _dsilu(a, s):
    return s * (1.0 + a * (1.0 - s))


@_primitive("silu")
class _Silu:
    @staticmethod
    def fwd(a):
        s = expit(a)
        return a * s, (a, s)

    @staticmethod
    def vjp(g, saved):
        return (g * _dsilu(*saved),)

    @staticmethod
    def jvp(ts, saved):
        return None if ts[0] is None else ts[0] * _dsilu(*saved)


@_primitive("add_bias")
class _AddBias:
    @staticmethod
    def fwd(x, b):
        if b.ndim != 1 or x.shape[-1] != b.shape[0]:
            raise ValueError(f"bias shape {b.shape} does not match input {x.shape}")
        return x + b, x.ndim

    @staticmethod
    def vjp(g, ndim):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    @staticmethod
    def jvp(ts, ndim):
        return _tsum(*ts)


@_primitive("stopgrad")
class _StopGrad:
    @staticmethod
    def fwd(a):
        return a.copy(), None

    @staticmethod
    def vjp(g, saved):
        return (None,)

    @staticmethod
    def jvp(ts, saved):
        return None


def primitive_set() -> list[str]:
    """Names of all primitives; each has forward, reverse and tangent rules."""
    return sorted(_PRIMITIVES)


# ---------------------------------------------------------------------------
# public op wrappers


def matmul(a, b):
    return _apply(_PRIMITIVES["matmul"], (a, b))


def add(a, b):
    return _apply(_PRIMITIVES["add"], (a, b))


def sub(a, b):
    return _apply(_PRIMITIVES["sub"], (a, b))


def mul(a, b):
    return _apply(_PRIMITIVES["mul"], (a, b))


def scale(a, c: float):
    return _apply(_PRIMITIVES["scale"], (a,), c=float(c))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return _apply(_PRIMITIVES["sum"], (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return _apply(_PRIMITIVES["mean"], (a,), axis=axis, keepdims=keepdims)


def square(a):
    return _apply(_PRIMITIVES["square"], (a,))


def concat(arrays: Sequence, axis: int = -1):
    return _apply(_PRIMITIVES["concat"], tuple(arrays), axis=axis)


def sigmoid(a):
    return _apply(_PRIMITIVES["sigmoid"], (a,))


def tanh(a):
    return _apply(_PRIMITIVES["tanh"], (a,))


def relu(a):
    return _apply(_PRIMITIVES["relu"], (a,))


def silu(a):
    return _apply(_PRIMITIVES["silu"], (a,))


def sin(a):
    return _apply(_PRIMITIVES["sin"], (a,))


def cos(a):
    return _apply(_PRIMITIVES["cos"], (a,))


def add_bias(x, b):
    return _apply(_PRIMITIVES["add_bias"], (x, b))


def stopgrad(a):
    """Identity in value; zero gradient and zero tangent."""
    if isinstance(a, (Tensor, DualTensor)):
        return _apply(_PRIMITIVES["stopgrad"], (a,))
    return np.asarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# drivers


def backward(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar taped output with respect to every leaf on ``tape``."""
    if not isinstance(output, Tensor) or output.tape is not tape:
        raise ValueError("output is detached: it has no node on this tape")
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[output.index] = np.ones_like(output.data)
    for i in range(output.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.prim is None:
            continue
        in_grads = node.prim.vjp(g, node.ctx["saved"])
        for j, gj in zip(node.inputs, in_grads):
            if j is None or gj is None:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out = {}
    for name, i in tape.leaves.items():
        g = grads[i]
        shape = tape.nodes[i].ctx.shape
        out[name] = np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64).reshape(shape)
    return out


def jvp(f: Callable, inputs: Sequence, tangents: Sequence):
    """Evaluate ``f(*inputs)`` and its directional derivative along ``tangents``.

    A scalar tangent is broadcast over its input (e.g. ``1`` for a batch of
    time values). Returns ``(value, tangent)`` as arrays; ``f`` may return a
    single array or a tuple of arrays.
    """
    if len(inputs) != len(tangents):
        raise ValueError("need one tangent per input")
    duals = []
    for x, tx in zip(inputs, tangents):
        x = np.asarray(value(x), dtype=np.float64)
        tx = np.asarray(tx, dtype=np.float64)
        if tx.shape != x.shape:
            if tx.ndim != 0:
                raise ValueError(f"tangent shape {tx.shape} does not match input shape {x.shape}")
            tx = np.full(x.shape, float(tx))
        duals.append(DualTensor(x, tx.copy()))
    out = f(*duals)
    if isinstance(out, tuple):
        return tuple(_split_dual(o) for o in out)
    return _split_dual(out)


def _split_dual(o):
    if isinstance(o, DualTensor):
        return o.primal, o.tangent
    o = np.asarray(o, dtype=np.float64)
    return o, np.zeros_like(o)
