"""Expression nodes, primitive operations and graph evaluation.

Nodes are immutable and hash-consed: building the same operation on the same
operands twice returns the same node, which gives common-subexpression reuse
for free when gradient graphs are emitted over existing graphs.
"""
from __future__ import annotations

import itertools
import weakref
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class UnboundSlotError(AutodiffError):
    pass


class NonDifferentiableError(AutodiffError):
    pass


_ids = itertools.count()
_intern: "weakref.WeakValueDictionary[tuple, Node]" = weakref.WeakValueDictionary()


class IndexArray:
    """Hashable wrapper for a constant integer index vector."""

    __slots__ = ("array", "_hash")

    def __init__(self, array):
        self.array = np.ascontiguousarray(array, dtype=np.int64).reshape(-1)
        self.array.setflags(write=False)
        self._hash = hash((self.array.shape, self.array.tobytes()))

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        return isinstance(other, IndexArray) and np.array_equal(self.array, other.array)

    def __len__(self):
        return len(self.array)

    def __repr__(self):
        return f"IndexArray(n={len(self.array)})"


class Node:
    __slots__ = ("op", "args", "attrs", "shape", "value", "id", "__weakref__")

    def __init__(self, op: str, args: tuple, attrs: tuple, shape: tuple, value=None):
        self.op = op
        self.args = args
        self.attrs = attrs
        self.shape = tuple(int(s) for s in shape)
        self.value = value
        self.id = next(_ids)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def name(self) -> str | None:
        return self.attrs[0] if self.op == "slot" else None

    @property
    def kind(self) -> str | None:
        return self.attrs[2] if self.op == "slot" else None

    def __repr__(self):
        if self.op == "slot":
            return f"Slot({self.name!r}, {self.shape}, {self.kind})"
        return f"Node({self.op}, shape={self.shape}, id={self.id})"

    # arithmetic sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


def _make(op: str, args: Sequence[Node], attrs: tuple = ()) -> Node:
    args = tuple(args)
    key = (op, tuple(a.id for a in args), attrs)
    node = _intern.get(key)
    if node is not None:
        return node
    shape = OPS[op].shape([a.shape for a in args], attrs)
    node = Node(op, args, attrs, shape)
    _intern[key] = node
    return node


# ---------------------------------------------------------------------------
# leaves


def slot(name: str, shape: Sequence[int], kind: str = "input") -> Node:
    """A named placeholder bound at evaluation time. Slots are interned by name."""
    if kind not in ("input", "param"):
        raise ValueError(f"slot kind must be 'input' or 'param', got {kind!r}")
    key = ("slot", (), (name, tuple(shape), kind))
    node = _intern.get(key)
    if node is None:
        node = Node("slot", (), (name, tuple(int(s) for s in shape), kind), shape)
        _intern[key] = node
    return node


def const(value) -> Node:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        key = ("const", (), (float(arr),))
        node = _intern.get(key)
        if node is None:
            node = Node("const", (), (float(arr),), (), arr)
            node.value.setflags(write=False)
            _intern[key] = node
        return node
    arr.setflags(write=False)
    return Node("const", (), (), arr.shape, arr)


def asnode(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def is_scalar_const(x: Node, value: float | None = None) -> bool:
    if x.op != "const" or x.shape != ():
        return False
    return value is None or float(x.value) == value


def zeros(shape) -> Node:
    return broadcast_to(const(0.0), shape)


def ones(shape) -> Node:
    return broadcast_to(const(1.0), shape)


# ---------------------------------------------------------------------------
# op table


class Op:
    """A primitive: shape rule, numpy forward, and graph-emitting derivative rules."""

    differentiable = True

    def shape(self, shapes, attrs):
        raise NotImplementedError

    def forward(self, vals, attrs):
        raise NotImplementedError

    def vjp(self, node: Node, g: Node) -> list:
        raise NonDifferentiableError(f"no gradient rule for '{node.op}'")

    def jvp(self, node: Node, tangents: list, T: int):
        raise NonDifferentiableError(f"no tangent rule for '{node.op}'")


OPS: dict[str, Op] = {}


def _register(name):
    def deco(cls):
        OPS[name] = cls()
        return cls
    return deco


def _lift(t: Node, arg_shape: tuple, out_ndim: int) -> Node:
    """Reshape a tangent (T, *arg_shape) so it broadcasts against rank-out_ndim primals."""
    pad = out_ndim - len(arg_shape)
    if pad <= 0:
        return t
    return reshape(t, (t.shape[0],) + (1,) * pad + tuple(arg_shape))


def _fit(t: Node, T: int, shape: tuple) -> Node:
    target = (T,) + tuple(shape)
    return t if t.shape == target else broadcast_to(t, target)


@_register("slot")
class _Slot(Op):
    def shape(self, shapes, attrs):
        return attrs[1]


@_register("const")
class _Const(Op):
    pass


class _Binary(Op):
    fn: Callable

    def shape(self, shapes, attrs):
        try:
            return np.broadcast_shapes(*shapes)
        except ValueError as exc:
            raise ShapeError(f"cannot broadcast {shapes[0]} with {shapes[1]}") from exc

    def forward(self, vals, attrs):
        return self.fn(vals[0], vals[1])


@_register("add")
class _Add(_Binary):
    fn = staticmethod(np.add)

    def vjp(self, node, g):
        a, b = node.args
        return [sum_to(g, a.shape), sum_to(g, b.shape)]

    def jvp(self, node, ts, T):
        a, b = node.args
        parts = [_lift(t, x.shape, node.ndim) for t, x in zip(ts, (a, b)) if t is not None]
        out = parts[0] if len(parts) == 1 else add(parts[0], parts[1])
        return _fit(out, T, node.shape)


@_register("sub")
class _Sub(_Binary):
    fn = staticmethod(np.subtract)

    def vjp(self, node, g):
        a, b = node.args
        return [sum_to(g, a.shape), neg(sum_to(g, b.shape))]

    def jvp(self, node, ts, T):
        a, b = node.args
        ta, tb = ts
        if ta is not None and tb is not None:
            out = sub(_lift(ta, a.shape, node.ndim), _lift(tb, b.shape, node.ndim))
        elif ta is not None:
            out = _lift(ta, a.shape, node.ndim)
        else:
            out = neg(_lift(tb, b.shape, node.ndim))
        return _fit(out, T, node.shape)


@_register("mul")
class _Mul(_Binary):
    fn = staticmethod(np.multiply)

    def vjp(self, node, g):
        a, b = node.args
        return [sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)]

    def jvp(self, node, ts, T):
        a, b = node.args
        ta, tb = ts
        parts = []
        if ta is not None:
            parts.append(mul(_lift(ta, a.shape, node.ndim), b))
        if tb is not None:
            parts.append(mul(a, _lift(tb, b.shape, node.ndim)))
        out = parts[0] if len(parts) == 1 else add(parts[0], parts[1])
        return _fit(out, T, node.shape)


@_register("div")
class _Div(_Binary):
    fn = staticmethod(np.divide)

    def vjp(self, node, g):
        a, b = node.args
        ga = div(g, b)
        return [sum_to(ga, a.shape), sum_to(neg(mul(ga, node)), b.shape)]

    def jvp(self, node, ts, T):
        a, b = node.args
        ta, tb = ts
        if ta is not None and tb is not None:
            num = sub(_lift(ta, a.shape, node.ndim), mul(node, _lift(tb, b.shape, node.ndim)))
        elif ta is not None:
            num = _lift(ta, a.shape, node.ndim)
        else:
            num = neg(mul(node, _lift(tb, b.shape, node.ndim)))
        return _fit(div(num, b), T, node.shape)


class _Unary(Op):
    """Elementwise op whose derivative is another graph expression."""

    def shape(self, shapes, attrs):
        return shapes[0]

    def deriv(self, node: Node) -> Node | None:
        raise NotImplementedError

    def vjp(self, node, g):
        d = self.deriv(node)
        return [None if d is None else mul(g, d)]

    def jvp(self, node, ts, T):
        d = self.deriv(node)
        return None if d is None else mul(ts[0], d)


@_register("neg")
class _Neg(_Unary):
    def forward(self, vals, attrs):
        return np.negative(vals[0])

    def vjp(self, node, g):
        return [neg(g)]

    def jvp(self, node, ts, T):
        return neg(ts[0])


@_register("exp")
class _Exp(_Unary):
    def forward(self, vals, attrs):
        return np.exp(vals[0])

    def deriv(self, node):
        return node


@_register("log")
class _Log(_Unary):
    def forward(self, vals, attrs):
        return np.log(vals[0])

    def vjp(self, node, g):
        return [div(g, node.args[0])]

    def jvp(self, node, ts, T):
        return div(ts[0], node.args[0])


@_register("sin")
class _Sin(_Unary):
    def forward(self, vals, attrs):
        return np.sin(vals[0])

    def deriv(self, node):
        return cos(node.args[0])


@_register("cos")
class _Cos(_Unary):
    def forward(self, vals, attrs):
        return np.cos(vals[0])

    def deriv(self, node):
        return neg(sin(node.args[0]))


@_register("tanh")
class _Tanh(_Unary):
    def forward(self, vals, attrs):
        return np.tanh(vals[0])

    def deriv(self, node):
        return sub(1.0, square(node))


@_register("sigmoid")
class _Sigmoid(_Unary):
    def forward(self, vals, attrs):
        # 0.5 * (1 + tanh(x / 2)): same values as the logistic to ~1 ulp absolute, faster
        out = np.multiply(vals[0], 0.5)
        np.tanh(out, out=out)
        out += 1.0
        out *= 0.5
        return out

    def deriv(self, node):
        return mul(node, sub(1.0, node))


@_register("softplus")
class _Softplus(_Unary):
    # attrs = (beta,)
    def forward(self, vals, attrs):
        beta = attrs[0]
        z = np.multiply(vals[0], beta)
        tail = np.abs(z)
        np.negative(tail, out=tail)
        np.exp(tail, out=tail)
        np.log1p(tail, out=tail)
        np.maximum(z, 0.0, out=z)
        z += tail
        z *= 1.0 / beta
        return z

    def deriv(self, node):
        return sigmoid(mul(node.attrs[0], node.args[0]))


@_register("sqrt")
class _Sqrt(_Unary):
    def forward(self, vals, attrs):
        return np.sqrt(vals[0])

    def vjp(self, node, g):
        return [div(mul(0.5, g), node)]

    def jvp(self, node, ts, T):
        return div(mul(0.5, ts[0]), node)


@_register("square")
class _Square(_Unary):
    def forward(self, vals, attrs):
        return np.square(vals[0])

    def deriv(self, node):
        return mul(2.0, node.args[0])


@_register("power")
class _Power(_Unary):
    # attrs = (exponent,)
    def forward(self, vals, attrs):
        return np.power(vals[0], attrs[0])

    def deriv(self, node):
        p = node.attrs[0]
        return mul(p, power(node.args[0], p - 1.0))


@_register("abs")
class _Abs(_Unary):
    def forward(self, vals, attrs):
        return np.abs(vals[0])

    def deriv(self, node):
        return sign(node.args[0])


@_register("relu")
class _Relu(_Unary):
    def forward(self, vals, attrs):
        return np.maximum(vals[0], 0.0)

    def deriv(self, node):
        return step(node.args[0])


class _Flat(_Unary):
    """Piecewise-constant op: derivative is zero wherever it exists."""

    def deriv(self, node):
        return None


@_register("sign")
class _Sign(_Flat):
    def forward(self, vals, attrs):
        return np.sign(vals[0])


@_register("step")
class _Step(_Flat):
    def forward(self, vals, attrs):
        return (vals[0] > 0.0).astype(np.float64)


@_register("stop_gradient")
class _StopGradient(_Flat):
    def forward(self, vals, attrs):
        return vals[0]


@_register("reduce_max")
class _ReduceMax(Op):
    """Hard maximum. Deliberately has no derivative rule."""

    differentiable = False

    def shape(self, shapes, attrs):
        return _reduced_shape(shapes[0], attrs[0], attrs[1])

    def forward(self, vals, attrs):
        return np.max(vals[0], axis=attrs[0], keepdims=attrs[1])


def _reduced_shape(shape, axes, keepdims):
    nd = len(shape)
    axes = {a % nd for a in axes}
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


@_register("sum")
class _Sum(Op):
    # attrs = (negative axes tuple, keepdims)
    def shape(self, shapes, attrs):
        return _reduced_shape(shapes[0], attrs[0], attrs[1])

    def forward(self, vals, attrs):
        return np.sum(vals[0], axis=attrs[0], keepdims=attrs[1])

    def vjp(self, node, g):
        a = node.args[0]
        axes, keepdims = node.attrs
        if not keepdims:
            g = reshape(g, _reduced_shape(a.shape, axes, True))
        return [broadcast_to(g, a.shape)]

    def jvp(self, node, ts, T):
        return sum(ts[0], axis=node.attrs[0], keepdims=node.attrs[1])


@_register("reshape")
class _Reshape(Op):
    def shape(self, shapes, attrs):
        if int(np.prod(shapes[0], dtype=np.int64)) != int(np.prod(attrs[0], dtype=np.int64)):
            raise ShapeError(f"cannot reshape {shapes[0]} to {attrs[0]}")
        return attrs[0]

    def forward(self, vals, attrs):
        return np.reshape(vals[0], attrs[0])

    def vjp(self, node, g):
        return [reshape(g, node.args[0].shape)]

    def jvp(self, node, ts, T):
        return reshape(ts[0], (T,) + node.shape)


@_register("broadcast_to")
class _BroadcastTo(Op):
    def shape(self, shapes, attrs):
        try:
            out = np.broadcast_shapes(shapes[0], attrs[0])
        except ValueError as exc:
            raise ShapeError(f"cannot broadcast {shapes[0]} to {attrs[0]}") from exc
        if tuple(out) != tuple(attrs[0]):
            raise ShapeError(f"cannot broadcast {shapes[0]} to {attrs[0]}")
        return attrs[0]

    def forward(self, vals, attrs):
        return np.broadcast_to(vals[0], attrs[0])

    def vjp(self, node, g):
        return [sum_to(g, node.args[0].shape)]

    def jvp(self, node, ts, T):
        t = _lift(ts[0], node.args[0].shape, node.ndim)
        return broadcast_to(t, (T,) + node.shape)


def _sum_to_np(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1
    )
    out = np.sum(x, axis=axes, keepdims=True) if axes else x
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


@_register("sum_to")
class _SumTo(Op):
    """Adjoint of broadcasting: sum a broadcast array back down to `shape`."""

    def shape(self, shapes, attrs):
        try:
            out = np.broadcast_shapes(shapes[0], attrs[0])
        except ValueError as exc:
            raise ShapeError(f"cannot sum {shapes[0]} down to {attrs[0]}") from exc
        if tuple(out) != tuple(shapes[0]):
            raise ShapeError(f"cannot sum {shapes[0]} down to {attrs[0]}")
        return attrs[0]

    def forward(self, vals, attrs):
        return _sum_to_np(vals[0], attrs[0])

    def vjp(self, node, g):
        return [broadcast_to(g, node.args[0].shape)]

    def jvp(self, node, ts, T):
        src = node.args[0].shape
        padded = (T,) + (1,) * (len(src) - node.ndim) + node.shape
        return reshape(sum_to(ts[0], padded), (T,) + node.shape)


@_register("transpose")
class _Transpose(Op):
    def shape(self, shapes, attrs):
        return tuple(shapes[0][p] for p in attrs[0])

    def forward(self, vals, attrs):
        return np.transpose(vals[0], attrs[0])

    def vjp(self, node, g):
        inv = tuple(np.argsort(node.attrs[0]).tolist())
        return [transpose(g, inv)]

    def jvp(self, node, ts, T):
        return transpose(ts[0], (0,) + tuple(p + 1 for p in node.attrs[0]))


@_register("matmul")
class _Matmul(Op):
    def shape(self, shapes, attrs):
        a, b = shapes
        if len(a) < 2 or len(b) < 2:
            raise ShapeError(f"matmul needs operands of rank >= 2, got {a} and {b}")
        if a[-1] != b[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a} @ {b}")
        try:
            batch = np.broadcast_shapes(a[:-2], b[:-2])
        except ValueError as exc:
            raise ShapeError(f"matmul batch dimensions differ: {a} @ {b}") from exc
        return tuple(batch) + (a[-2], b[-1])

    def forward(self, vals, attrs):
        return np.matmul(vals[0], vals[1])

    def vjp(self, node, g):
        a, b = node.args
        return [
            sum_to(matmul(g, swapaxes(b)), a.shape),
            sum_to(matmul(swapaxes(a), g), b.shape),
        ]

    def jvp(self, node, ts, T):
        a, b = node.args
        ta, tb = ts
        parts = []
        if ta is not None:
            parts.append(matmul(_lift(ta, a.shape, node.ndim), b))
        if tb is not None:
            parts.append(matmul(a, _lift(tb, b.shape, node.ndim)))
        out = parts[0] if len(parts) == 1 else add(parts[0], parts[1])
        return _fit(out, T, node.shape)


@_register("take")
class _Take(Op):
    # attrs = (IndexArray, negative axis)
    def shape(self, shapes, attrs):
        idx, axis = attrs
        s = list(shapes[0])
        s[axis] = len(idx)
        return tuple(s)

    def forward(self, vals, attrs):
        return np.take(vals[0], attrs[0].array, axis=attrs[1])

    def vjp(self, node, g):
        idx, axis = node.attrs
        return [scatter_add(g, idx, axis, node.args[0].shape[axis])]

    def jvp(self, node, ts, T):
        return take(ts[0], node.attrs[0], node.attrs[1])


@_register("scatter_add")
class _ScatterAdd(Op):
    # attrs = (IndexArray, negative axis, size)
    def shape(self, shapes, attrs):
        idx, axis, size = attrs
        s = list(shapes[0])
        if s[axis] != len(idx):
            raise ShapeError("scatter_add index length differs from source axis")
        s[axis] = size
        return tuple(s)

    def forward(self, vals, attrs):
        idx, axis, size = attrs
        src = np.moveaxis(vals[0], axis, 0)
        out = np.zeros((size,) + src.shape[1:])
        np.add.at(out, idx.array, src)
        return np.moveaxis(out, 0, axis)

    def vjp(self, node, g):
        return [take(g, node.attrs[0], node.attrs[1])]

    def jvp(self, node, ts, T):
        idx, axis, size = node.attrs
        return scatter_add(ts[0], idx, axis, size)


def _key_to_slices(key):
    return tuple(slice(*k) for k in key)


@_register("slice")
class _Slice(Op):
    # attrs = (per-dimension (start, stop, step) tuples,)
    def shape(self, shapes, attrs):
        probe = np.empty(shapes[0], dtype=np.bool_)
        return probe[_key_to_slices(attrs[0])].shape

    def forward(self, vals, attrs):
        return vals[0][_key_to_slices(attrs[0])]

    def vjp(self, node, g):
        return [embed(g, node.attrs[0], node.args[0].shape)]

    def jvp(self, node, ts, T):
        return _slice(ts[0], ((None, None, None),) + node.attrs[0])


@_register("embed")
class _Embed(Op):
    """Place the operand into a zero array of `shape` at a slice (adjoint of slicing)."""

    # attrs = (key, shape)
    def shape(self, shapes, attrs):
        return attrs[1]

    def forward(self, vals, attrs):
        out = np.zeros(attrs[1])
        out[_key_to_slices(attrs[0])] = vals[0]
        return out

    def vjp(self, node, g):
        return [_slice(g, node.attrs[0])]

    def jvp(self, node, ts, T):
        key, shape = node.attrs
        return embed(ts[0], ((None, None, None),) + key, (T,) + shape)


@_register("concat")
class _Concat(Op):
    # attrs = (negative axis,)
    def shape(self, shapes, attrs):
        axis = attrs[0]
        base = list(shapes[0])
        for s in shapes[1:]:
            if len(s) != len(base) or any(
                x != y for i, (x, y) in enumerate(zip(s, base)) if i != len(base) + axis
            ):
                raise ShapeError(f"concat shape mismatch: {shapes}")
        base[axis] = builtins_sum(s[axis] for s in shapes)
        return tuple(base)

    def forward(self, vals, attrs):
        return np.concatenate(vals, axis=attrs[0])

    def vjp(self, node, g):
        axis = node.attrs[0]
        out, start = [], 0
        for a in node.args:
            n = a.shape[axis]
            out.append(slice_axis(g, axis, start, start + n))
            start += n
        return out

    def jvp(self, node, ts, T):
        parts = [t if t is not None else zeros((T,) + a.shape) for t, a in zip(ts, node.args)]
        return concat(parts, axis=node.attrs[0])


@_register("cumsum")
class _Cumsum(Op):
    # attrs = (negative axis, reverse)
    def shape(self, shapes, attrs):
        return shapes[0]

    def forward(self, vals, attrs):
        axis, reverse = attrs
        x = vals[0]
        if reverse:
            return np.flip(np.cumsum(np.flip(x, axis), axis=axis), axis)
        return np.cumsum(x, axis=axis)

    def vjp(self, node, g):
        axis, reverse = node.attrs
        return [cumsum(g, axis, not reverse)]

    def jvp(self, node, ts, T):
        return cumsum(ts[0], *node.attrs)


import builtins as _builtins  # noqa: E402

builtins_sum = _builtins.sum


# ---------------------------------------------------------------------------
# user-facing constructors


def _binary(op, a, b):
    return _make(op, (asnode(a), asnode(b)))


def add(a, b):
    a, b = asnode(a), asnode(b)
    if is_scalar_const(b, 0.0) and np.broadcast_shapes(a.shape, ()) == a.shape:
        return a
    if is_scalar_const(a, 0.0):
        return b
    return _binary("add", a, b)


def sub(a, b):
    a, b = asnode(a), asnode(b)
    if is_scalar_const(b, 0.0):
        return a
    return _binary("sub", a, b)


def mul(a, b):
    a, b = asnode(a), asnode(b)
    if is_scalar_const(b, 1.0):
        return a
    if is_scalar_const(a, 1.0):
        return b
    return _binary("mul", a, b)


def div(a, b):
    a, b = asnode(a), asnode(b)
    if is_scalar_const(b, 1.0):
        return a
    return _binary("div", a, b)


def _unary(op, a, attrs=()):
    return _make(op, (asnode(a),), attrs)


def neg(a):
    return _unary("neg", a)


def exp(a):
    return _unary("exp", a)


def log(a):
    return _unary("log", a)


def sin(a):
    return _unary("sin", a)


def cos(a):
    return _unary("cos", a)


def tanh(a):
    return _unary("tanh", a)


def sigmoid(a):
    return _unary("sigmoid", a)


def softplus(a, beta: float = 1.0):
    return _unary("softplus", a, (float(beta),))


def sqrt(a):
    return _unary("sqrt", a)


def square(a):
    return _unary("square", a)


def power(a, p: float):
    p = float(p)
    if p == 1.0:
        return asnode(a)
    if p == 2.0:
        return square(a)
    return _unary("power", a, (p,))


def abs(a):  # noqa: A001 - mirrors numpy naming
    return _unary("abs", a)


def relu(a):
    return _unary("relu", a)


def sign(a):
    return _unary("sign", a)


def step(a):
    """Heaviside step (1 where a > 0); zero derivative."""
    return _unary("step", a)


def stop_gradient(a):
    return _unary("stop_gradient", a)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(-ndim, 0))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax - ndim if ax >= 0 else ax)
    return tuple(sorted(set(out)))


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001
    a = asnode(a)
    axes = _norm_axes(axis, a.ndim)
    if not axes:
        return a
    return _make("sum", (a,), (axes, bool(keepdims)))


def mean(a, axis=None, keepdims: bool = False):
    a = asnode(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes], dtype=np.int64))
    return div(sum(a, axes, keepdims), float(count))


def reduce_max(a, axis=None, keepdims: bool = False):
    a = asnode(a)
    return _make("reduce_max", (a,), (_norm_axes(axis, a.ndim), bool(keepdims)))


def reshape(a, shape):
    a = asnode(a)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1], dtype=np.int64))
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if shape == a.shape:
        return a
    return _make("reshape", (a,), (shape,))


def broadcast_to(a, shape):
    a = asnode(a)
    shape = tuple(int(s) for s in shape)
    if shape == a.shape:
        return a
    return _make("broadcast_to", (a,), (shape,))


def sum_to(a, shape):
    a = asnode(a)
    shape = tuple(int(s) for s in shape)
    if shape == a.shape:
        return a
    return _make("sum_to", (a,), (shape,))


def transpose(a, perm=None):
    a = asnode(a)
    if perm is None:
        perm = tuple(reversed(range(a.ndim)))
    perm = tuple(int(p) for p in perm)
    if perm == tuple(range(a.ndim)):
        return a
    return _make("transpose", (a,), (perm,))


def swapaxes(a):
    """Swap the last two axes."""
    a = asnode(a)
    perm = list(range(a.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return transpose(a, perm)


def matmul(a, b):
    return _binary("matmul", a, b)


def take(a, idx, axis: int = 0):
    a = asnode(a)
    if not isinstance(idx, IndexArray):
        idx = IndexArray(idx)
    axis = _norm_axes(axis, a.ndim)[0]
    return _make("take", (a,), (idx, axis))


def scatter_add(a, idx, axis: int, size: int):
    a = asnode(a)
    if not isinstance(idx, IndexArray):
        idx = IndexArray(idx)
    axis = _norm_axes(axis, a.ndim)[0]
    return _make("scatter_add", (a,), (idx, axis, int(size)))


def _slice(a, key):
    a = asnode(a)
    if all(k == (None, None, None) for k in key):
        return a
    return _make("slice", (a,), (tuple(key),))


def embed(a, key, shape):
    return _make("embed", (asnode(a),), (tuple(key), tuple(shape)))


def slice_axis(a, axis: int, start: int, stop: int):
    a = asnode(a)
    ax = axis % a.ndim
    key = [(None, None, None)] * a.ndim
    key[ax] = (start, stop, None)
    return _slice(a, key)


def getitem(a, key):
    """Basic indexing: ints and slices only (no fancy indexing)."""
    a = asnode(a)
    if not isinstance(key, tuple):
        key = (key,)
    if Ellipsis in key:
        i = key.index(Ellipsis)
        fill = a.ndim - (len(key) - 1)
        key = key[:i] + (slice(None),) * fill + key[i + 1:]
    norm, drop = [], []
    for dim, k in enumerate(key):
        if isinstance(k, (int, np.integer)):
            k = int(k) % a.shape[dim]
            norm.append((k, k + 1, None))
            drop.append(dim)
        elif isinstance(k, slice):
            norm.append((k.start, k.stop, k.step))
        else:
            raise TypeError(f"unsupported index {k!r}; use take() for index arrays")
    norm += [(None, None, None)] * (a.ndim - len(norm))
    out = _slice(a, norm)
    if drop:
        out = reshape(out, tuple(s for i, s in enumerate(out.shape) if i not in drop))
    return out


def concat(parts, axis: int = 0):
    parts = [asnode(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    axis = _norm_axes(axis, parts[0].ndim)[0]
    return _make("concat", parts, (axis,))


def stack(parts, axis: int = 0):
    parts = [asnode(p) for p in parts]
    nd = parts[0].ndim + 1
    ax = axis % nd
    expanded = [reshape(p, p.shape[:ax] + (1,) + p.shape[ax:]) for p in parts]
    return concat(expanded, axis=ax)


def cumsum(a, axis: int = -1, reverse: bool = False):
    a = asnode(a)
    return _make("cumsum", (a,), (_norm_axes(axis, a.ndim)[0], bool(reverse)))


def dot(a, b, axis: int = -1, keepdims: bool = False):
    return sum(mul(a, b), axis=axis, keepdims=keepdims)


def norm(a, axis: int = -1, keepdims: bool = False, eps: float = 0.0):
    """Euclidean norm; `eps` > 0 gives sqrt(|a|^2 + eps^2), finite at a = 0."""
    s = sum(square(a), axis=axis, keepdims=keepdims)
    if eps:
        s = add(s, eps * eps)
    return sqrt(s)


def cosine_similarity(a, b, axis: int = -1, eps: float = 0.0):
    return div(dot(a, b, axis), mul(norm(a, axis, eps=eps), norm(b, axis, eps=eps)))


# ---------------------------------------------------------------------------
# graphs


def topological_order(outputs: Iterable[Node]) -> list[Node]:
    """Operands-before-consumers order, deterministic in operand order."""
    order: list[Node] = []
    seen: set[int] = set()
    for root in outputs:
        if root.id in seen:
            continue
        stack_ = [(root, 0)]
        while stack_:
            node, i = stack_.pop()
            if i == 0 and node.id in seen:
                continue
            if i < len(node.args):
                stack_.append((node, i + 1))
                child = node.args[i]
                if child.id not in seen:
                    stack_.append((child, 0))
            else:
                seen.add(node.id)
                order.append(node)
    return order


class Graph:
    """An immutable differentiable computation record with one or more outputs.

    Evaluation against distinct binding sets is thread-safe: all working state
    lives in the call frame.
    """

    def __init__(self, outputs: Node | Sequence[Node], name: str | None = None):
        if isinstance(outputs, Node):
            outputs = [outputs]
        self.outputs: tuple[Node, ...] = tuple(asnode(o) for o in outputs)
        self.name = name
        self.order = topological_order(self.outputs)
        self.slots: dict[str, Node] = {}
        for node in self.order:
            if node.op == "slot":
                other = self.slots.get(node.name)
                if other is not None and other is not node:
                    raise ShapeError(f"slot {node.name!r} declared with two shapes")
                self.slots[node.name] = node
        pos = {n.id: i for i, n in enumerate(self.order)}
        last = {}
        for i, node in enumerate(self.order):
            for a in node.args:
                last[a.id] = i
        for o in self.outputs:
            last[o.id] = len(self.order)
        self._release: list[list[int]] = [[] for _ in self.order]
        for nid, i in last.items():
            if i < len(self.order):
                self._release[i].append(nid)
        self._pos = pos

    @property
    def params(self) -> dict[str, Node]:
        return {k: v for k, v in self.slots.items() if v.kind == "param"}

    @property
    def inputs(self) -> dict[str, Node]:
        return {k: v for k, v in self.slots.items() if v.kind == "input"}

    def __len__(self):
        return len(self.order)

    def evaluate(self, bindings: Mapping[str, Any], cache: dict | None = None, keep: bool = False):
        """Evaluate all outputs.

        `cache` maps node ids to already-computed values (e.g. from an earlier
        `keep=True` evaluation sharing nodes with this graph). With `keep=True`
        the full value table is returned alongside the outputs.
        """
        for name in self.slots:
            if name not in bindings:
                raise UnboundSlotError(f"slot {name!r} is not bound")
        values: dict[int, np.ndarray] = {}
        for i, node in enumerate(self.order):
            if cache is not None and node.id in cache:
                values[node.id] = cache[node.id]
            elif node.op == "slot":
                arr = np.asarray(bindings[node.name], dtype=np.float64)
                if arr.shape != node.shape:
                    raise ShapeError(
                        f"slot {node.name!r} expects shape {node.shape}, got {arr.shape}"
                    )
                values[node.id] = arr
            elif node.op == "const":
                values[node.id] = node.value
            else:
                values[node.id] = OPS[node.op].forward(
                    [values[a.id] for a in node.args], node.attrs
                )
            if not keep:
                for nid in self._release[i]:
                    values.pop(nid, None)
        outs = [values[o.id] for o in self.outputs]
        if keep:
            return outs, values
        return outs


def evaluate(graph: Graph | Node | Sequence[Node], bindings: Mapping[str, Any]):
    """Evaluate a graph (or bare node) and return the root value(s)."""
    if isinstance(graph, Node):
        return Graph(graph).evaluate(bindings)[0]
    if not isinstance(graph, Graph):
        return Graph(graph).evaluate(bindings)
    outs = graph.evaluate(bindings)
    return outs[0] if len(outs) == 1 else outs


@dataclass(frozen=True)
class GradientRequest:
    root: Node
    targets: tuple
    level: int = 1
