"""Dense reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive executed on its tensors.  Each
primitive is registered once with a forward rule and an adjoint rule, so the
tape can be replayed forward (bit-identically) or walked backward.

    tape = Tape()
    x = tape.input("x", [[1.0, 2.0]])
    y = dm.sum(dm.mul(x, x))
    grads = tape.backward(y)       # {"x": array([[2., 4.]])}

Arrays are float64 throughout.  There is no implicit broadcasting except for
adding a bias row vector to every row of a matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

NEG_SENTINEL = -1e30
LN_EPS = 1e-5

ArrayLike = Union[np.ndarray, Sequence, float]


class ShapeError(ValueError):
    """Operand shapes do not fit the primitive."""


class DomainError(ValueError):
    """Operand lies outside the primitive's domain (e.g. log of a non-positive value)."""


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    adjoint: Callable  # (grad_out, out, inputs, attrs) -> tuple of input grads (None = no grad)


PRIMITIVES: Dict[str, Primitive] = {}


def _register(name):
    def deco(pair):
        fwd, adj = pair()
        PRIMITIVES[name] = Primitive(name, fwd, adj)
        return PRIMITIVES[name]

    return deco


class Tensor:
    __slots__ = ("tape", "index", "name")

    def __init__(self, tape: "Tape", index: int, name: Optional[str] = None):
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __add__(self, other):
        return add(self, _lift(self.tape, other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(self.tape, other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(self.tape, other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def _lift(tape, other, shape):
    if isinstance(other, Tensor):
        return other
    if np.isscalar(other):
        return tape.const(np.full(shape, float(other)))
    return tape.const(other)


@dataclass
class _Node:
    op: str
    inputs: Tuple[int, ...]
    attrs: dict
    out: int


@dataclass
class Tape:
    """Ordered record of primitive executions plus named leaves."""

    values: List[np.ndarray] = field(default_factory=list)
    nodes: List[_Node] = field(default_factory=list)
    leaves: Dict[str, int] = field(default_factory=dict)
    params: List[str] = field(default_factory=list)
    outputs: Dict[str, "Tensor"] = field(default_factory=dict)

    def _leaf(self, array, name=None) -> Tensor:
        arr = np.array(array, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values.append(arr)
        idx = len(self.values) - 1
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = idx
        return Tensor(self, idx, name)

    def input(self, name: str, array: ArrayLike) -> Tensor:
        return self._leaf(array, name)

    def param(self, name: str, array: ArrayLike) -> Tensor:
        t = self._leaf(array, name)
        self.params.append(name)
        return t

    def const(self, array: ArrayLike) -> Tensor:
        return self._leaf(array)

    def record(self, op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
        prim = PRIMITIVES[op]
        for t in inputs:
            if t.tape is not self:
                raise ValueError(f"{op}: operand belongs to a different tape")
        out = prim.forward(*(t.value for t in inputs), **attrs)
        self.values.append(out)
        idx = len(self.values) - 1
        self.nodes.append(_Node(op, tuple(t.index for t in inputs), attrs, idx))
        return Tensor(self, idx)

    def replay(self) -> List[np.ndarray]:
        """Recompute every recorded node from the stored leaves."""
        vals = list(self.values)
        for node in self.nodes:
            vals[node.out] = PRIMITIVES[node.op].forward(*(vals[i] for i in node.inputs), **node.attrs)
        return vals

    def gradients(self, output: Tensor) -> List[Optional[np.ndarray]]:
        if output.value.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grads: List[Optional[np.ndarray]] = [None] * len(self.values)
        grads[output.index] = np.ones_like(output.value)
        for node in reversed(self.nodes):
            if node.out > output.index:
                continue
            g = grads[node.out]
            if g is None:
                continue
            ins = [self.values[i] for i in node.inputs]
            parts = PRIMITIVES[node.op].adjoint(g, self.values[node.out], ins, node.attrs)
            for i, gi in zip(node.inputs, parts):
                if gi is None:
                    continue
                if grads[i] is None:
                    grads[i] = gi
                else:
                    grads[i] = grads[i] + gi
        return grads

    def backward(self, output: Tensor) -> Dict[str, np.ndarray]:
        """Gradients of scalar ``output`` for every named leaf (zeros when unused)."""
        grads = self.gradients(output)
        res = {}
        for name, idx in self.leaves.items():
            g = grads[idx]
            res[name] = np.zeros_like(self.values[idx]) if g is None else g
        return res


def _same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbias(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0)


# --- primitives -------------------------------------------------------------


@_register("add")
def _add():
    def fwd(a, b):
        if a.shape != b.shape and not (a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]):
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return a + b

    def adj(g, out, ins, attrs):
        return g, _unbias(g, ins[1].shape)

    return fwd, adj


@_register("sub")
def _sub():
    def fwd(a, b):
        _same("sub", a, b)
        return a - b

    return fwd, lambda g, out, ins, attrs: (g, -g)


@_register("mul")
def _mul():
    def fwd(a, b):
        _same("mul", a, b)
        return a * b

    return fwd, lambda g, out, ins, attrs: (g * ins[1], g * ins[0])


@_register("div")
def _div():
    def fwd(a, b):
        _same("div", a, b)
        if np.any(b == 0):
            raise DomainError("div: zero denominator")
        return a / b

    def adj(g, out, ins, attrs):
        return g / ins[1], -g * out / ins[1]

    return fwd, adj


@_register("scale")
def _scale():
    return (lambda a, c: a * c), (lambda g, out, ins, attrs: (g * attrs["c"],))


@_register("shift")
def _shift():
    return (lambda a, c: a + c), (lambda g, out, ins, attrs: (g,))


@_register("matmul")
def _matmul():
    def fwd(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return a @ b

    return fwd, lambda g, out, ins, attrs: (g @ ins[1].T, ins[0].T @ g)


@_register("transpose")
def _transpose():
    def fwd(a):
        if a.ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
        return a.T.copy()

    return fwd, lambda g, out, ins, attrs: (g.T,)


@_register("linear")
def _linear():
    def fwd(x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(f"linear: x {x.shape}, weight {w.shape}, bias {b.shape}")
        return x @ w + b

    return fwd, lambda g, out, ins, attrs: (g @ ins[1].T, ins[0].T @ g, g.sum(axis=0))


@_register("relu")
def _relu():
    return (lambda a: np.maximum(a, 0.0)), (lambda g, out, ins, attrs: (g * (ins[0] > 0),))


@_register("sigmoid")
def _sigmoid():
    def fwd(a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return fwd, lambda g, out, ins, attrs: (g * out * (1.0 - out),)


@_register("log")
def _log():
    def fwd(a):
        if np.any(a <= 0):
            raise DomainError("log: non-positive argument")
        return np.log(a)

    return fwd, lambda g, out, ins, attrs: (g / ins[0],)


@_register("exp")
def _exp():
    return np.exp, lambda g, out, ins, attrs: (g * out,)


@_register("pow")
def _pow():
    def fwd(a, p):
        if p != int(p) and np.any(a < 0):
            raise DomainError("pow: negative base with fractional exponent")
        return np.power(a, p)

    def adj(g, out, ins, attrs):
        p = attrs["p"]
        return (g * p * np.power(ins[0], p - 1),)

    return fwd, adj


@_register("clip")
def _clip():
    def fwd(a, lo, hi):
        return np.clip(a, lo, hi)

    def adj(g, out, ins, attrs):
        a = ins[0]
        return (g * ((a >= attrs["lo"]) & (a <= attrs["hi"])),)

    return fwd, adj


@_register("rowsoftmax")
def _rowsoftmax():
    def fwd(a):
        if a.ndim != 2:
            raise ShapeError(f"rowsoftmax: expected a matrix, got shape {a.shape}")
        z = a - a.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def adj(g, out, ins, attrs):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return fwd, adj


@_register("layernorm")
def _layernorm():
    def fwd(x, *affine):
        if x.ndim != 2:
            raise ShapeError(f"layernorm: expected a matrix, got shape {x.shape}")
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        y = xc / np.sqrt(var + LN_EPS)
        if affine:
            gamma, beta = affine
            if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
                raise ShapeError(f"layernorm: affine {gamma.shape}/{beta.shape} for width {x.shape[1]}")
            y = y * gamma + beta
        return y

    def adj(g, out, ins, attrs):
        x = ins[0]
        d = x.shape[1]
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
        xhat = xc * inv
        if len(ins) == 3:
            gamma = ins[1]
            gy = g * gamma
            extra = ((g * xhat).sum(axis=0), g.sum(axis=0))
        else:
            gy = g
            extra = ()
        gx = inv / d * (d * gy - gy.sum(axis=1, keepdims=True) - xhat * (gy * xhat).sum(axis=1, keepdims=True))
        return (gx,) + extra

    return fwd, adj


@_register("sum")
def _sum():
    def fwd(a, axis):
        return np.asarray(a.sum(axis=axis))

    def adj(g, out, ins, attrs):
        axis = attrs["axis"]
        shape = ins[0].shape
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return fwd, adj


@_register("mean")
def _mean():
    def fwd(a, axis):
        if a.size == 0:
            raise ShapeError("mean: empty operand")
        return np.asarray(a.mean(axis=axis))

    def adj(g, out, ins, attrs):
        axis = attrs["axis"]
        shape = ins[0].shape
        n = ins[0].size if axis is None else shape[axis]
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return fwd, adj


@_register("concat")
def _concat():
    def fwd(*arrays, axis):
        ref = arrays[0]
        for a in arrays[1:]:
            if a.ndim != ref.ndim or any(
                a.shape[k] != ref.shape[k] for k in range(ref.ndim) if k != axis % ref.ndim
            ):
                raise ShapeError(f"concat: incompatible shapes {ref.shape} and {a.shape} on axis {axis}")
        return np.concatenate(arrays, axis=axis)

    def adj(g, out, ins, attrs):
        axis = attrs["axis"]
        cuts = np.cumsum([a.shape[axis] for a in ins])[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    return fwd, adj


@_register("select")
def _select():
    def fwd(a, index, axis):
        return np.take(a, index, axis=axis)

    def adj(g, out, ins, attrs):
        a = ins[0]
        full = np.zeros_like(a)
        idx = attrs["index"]
        axis = attrs["axis"]
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return fwd, adj


@_register("reshape")
def _reshape():
    def fwd(a, shape):
        if int(np.prod(shape)) != a.size:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
        return a.reshape(shape).copy()

    return fwd, lambda g, out, ins, attrs: (g.reshape(ins[0].shape),)


# --- public op functions ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record("add", (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record("sub", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record("mul", (a, b))


def div(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record("div", (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return a.tape.record("scale", (a,), c=float(c))


def shift(a: Tensor, c: float) -> Tensor:
    return a.tape.record("shift", (a,), c=float(c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record("matmul", (a, b))


def transpose(a: Tensor) -> Tensor:
    return a.tape.record("transpose", (a,))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x.tape.record("linear", (x, w, b))


def relu(a: Tensor) -> Tensor:
    return a.tape.record("relu", (a,))


def sigmoid(a: Tensor) -> Tensor:
    return a.tape.record("sigmoid", (a,))


def log(a: Tensor) -> Tensor:
    return a.tape.record("log", (a,))


def exp(a: Tensor) -> Tensor:
    return a.tape.record("exp", (a,))


def power(a: Tensor, p: float) -> Tensor:
    return a.tape.record("pow", (a,), p=float(p))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    return a.tape.record("clip", (a,), lo=float(lo), hi=float(hi))


def rowsoftmax(a: Tensor) -> Tensor:
    return a.tape.record("rowsoftmax", (a,))


def layernorm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None) -> Tensor:
    if (gamma is None) != (beta is None):
        raise ValueError("layernorm: pass both gamma and beta, or neither")
    ins = (x,) if gamma is None else (x, gamma, beta)
    return x.tape.record("layernorm", ins)


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return a.tape.record("sum", (a,), axis=axis)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return a.tape.record("mean", (a,), axis=axis)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return a.tape.record("reshape", (a,), shape=tuple(int(k) for k in shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return tensors[0].tape.record("concat", tuple(tensors), axis=axis)


def select(a: Tensor, index, axis: int = 0) -> Tensor:
    """Pick rows (axis 0) or columns (axis 1) by integer index or boolean mask."""
    index = np.asarray(index)
    if index.dtype == bool:
        if index.shape != (a.shape[axis],):
            raise ShapeError(f"select: mask length {index.shape} does not fit axis {axis} of {a.shape}")
        index = np.flatnonzero(index)
    index = index.astype(np.int64)
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise ShapeError(f"select: index out of range for axis {axis} of {a.shape}")
    return a.tape.record("select", (a,), index=index, axis=axis)


# --- graph-level helpers ----------------------------------------------------

Graph = Callable[[Dict[str, Tensor]], Union[Tensor, Dict[str, Tensor]]]


def evaluate(graph: Graph, named_inputs: Mapping[str, ArrayLike]) -> Tuple[Dict[str, np.ndarray], Tape]:
    """Run ``graph`` on fresh leaves; returns output values and the tape.

    ``graph`` receives a dict of input tensors and returns a tensor or a dict
    of tensors.  A single tensor is reported under the key ``"y"``.
    """
    tape = Tape()
    ins = {k: tape.input(k, v) for k, v in named_inputs.items()}
    out = graph(ins)
    if isinstance(out, Tensor):
        out = {"y": out}
    tape.outputs = out
    return {k: v.value.copy() for k, v in out.items()}, tape


def backward(tape: Tape, output: Union[str, Tensor] = "y") -> Dict[str, np.ndarray]:
    if isinstance(output, str):
        output = tape.outputs[output]
    return tape.backward(output)


def grad_check(
    graph: Graph,
    point: Mapping[str, ArrayLike],
    step: float = 1e-5,
    tolerance: Optional[float] = None,
    output: str = "y",
    coords: Optional[Mapping[str, np.ndarray]] = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``coords`` optionally restricts the check to the listed flat indices; inputs
    missing from it are then skipped.
    ``tolerance`` is accepted for call-site symmetry; the caller asserts.
    The step is rounded to the nearest power of two and the difference is divided
    by the perturbation actually realized in floating point, which removes the
    input-side rounding error (linear graphs check exactly).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    step = 2.0 ** round(math.log2(step))
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    _, tape = evaluate(graph, base)
    analytic = backward(tape, output)

    def f(vals):
        out, _ = evaluate(graph, vals)
        return float(out[output])

    worst = 0.0
    for name, arr in base.items():
        if coords is None:
            flat_idx = range(arr.size)
        else:
            flat_idx = coords.get(name, ())
        for i in flat_idx:
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name].flat[i] += step
            minus[name].flat[i] -= step
            numeric = (f(plus) - f(minus)) / (plus[name].flat[i] - minus[name].flat[i])
            err = abs(analytic[name].flat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
