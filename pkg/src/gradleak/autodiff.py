"""Small reverse-mode autodiff over numpy arrays.

Every vector-Jacobian product is itself written with ``Var`` operations, so
gradients can be differentiated again (``create_graph=True``). That is what
the gradient-matching attack and the input-gradient Jacobian rely on.

Only the handful of primitives needed by the mini classifiers exist:
elementwise arithmetic with broadcasting, 2-D matmul, reductions, reshape,
transpose, exp/log/sqrt, and an index ``gather`` (with its adjoint
``scatter_add``) that covers both im2col and max pooling.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Var:
    __slots__ = ("value", "parents", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), requires_grad: bool | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[tuple[Var, Callable[[Var], Var]], ...] = tuple(
            (p, fn) for p, fn in parents if p.requires_grad
        )
        if requires_grad is None:
            requires_grad = bool(self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def leaf(value, requires_grad: bool = True) -> Var:
    return Var(value, requires_grad=requires_grad)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


def _sum_to(g: Var, shape: tuple[int, ...]) -> Var:
    """Reduce a broadcast cotangent back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.value.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value + b.value,
        ((a, lambda g: _sum_to(g, a.shape)), (b, lambda g: _sum_to(g, b.shape))),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value - b.value,
        ((a, lambda g: _sum_to(g, a.shape)), (b, lambda g: _sum_to(neg(g), b.shape))),
    )


def neg(a) -> Var:
    a = as_var(a)
    return Var(-a.value, ((a, neg),))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value * b.value,
        ((a, lambda g: _sum_to(mul(g, b), a.shape)), (b, lambda g: _sum_to(mul(g, a), b.shape))),
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def db(g):
        return _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)

    return Var(a.value / b.value, ((a, lambda g: _sum_to(div(g, b), a.shape)), (b, db)))


def exp(a) -> Var:
    a = as_var(a)
    val = np.exp(a.value)
    holder: list[Var] = []

    def da(g):
        return mul(g, holder[0])

    out = Var(val, ((a, da),))
    holder.append(out)
    return out


def log(a) -> Var:
    a = as_var(a)
    return Var(np.log(a.value), ((a, lambda g: div(g, a)),))


def sqrt(a) -> Var:
    a = as_var(a)
    holder: list[Var] = []

    def da(g):
        return div(g, mul(2.0, holder[0]))

    out = Var(np.sqrt(a.value), ((a, da),))
    holder.append(out)
    return out


def relu(a) -> Var:
    a = as_var(a)
    mask = (a.value > 0).astype(np.float64)
    return Var(a.value * mask, ((a, lambda g: mul(g, mask)),))


# -- linear algebra and shape ----------------------------------------------

def matmul(a, b) -> Var:
    """2-D matrix product."""
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return Var(
        a.value @ b.value,
        ((a, lambda g: matmul(g, transpose(b))), (b, lambda g: matmul(transpose(a), g))),
    )


def sum_(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    val = np.sum(a.value, axis=axis, keepdims=keepdims)
    shape = a.shape
    if axis is None:
        kept = (1,) * len(shape)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def da(g):
        return broadcast_to(reshape(g, kept), shape)

    return Var(val, ((a, da),))


def broadcast_to(a, shape: tuple[int, ...]) -> Var:
    a = as_var(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return Var(np.broadcast_to(a.value, shape).copy(), ((a, lambda g: _sum_to(g, a.shape)),))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    val = a.value.reshape(shape)
    if val.shape == old:
        return a
    return Var(val, ((a, lambda g: reshape(g, old)),))


def transpose(a, axes: Sequence[int] | None = None) -> Var:
    a = as_var(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Var(np.transpose(a.value, axes), ((a, lambda g: transpose(g, inv)),))


def gather(a, index: Array) -> Var:
    """``a.ravel()[index]``; ``index`` is a constant integer array of any shape."""
    a = as_var(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape
    return Var(
        a.value.reshape(-1)[index],
        ((a, lambda g: scatter_add(g, index, shape)),),
    )


def scatter_add(a, index: Array, shape: tuple[int, ...]) -> Var:
    """Adjoint of ``gather``: sums entries of ``a`` into a zero array of ``shape``."""
    a = as_var(a)
    flat = np.zeros(int(np.prod(shape)), dtype=np.float64)
    np.add.at(flat, index.reshape(-1), a.value.reshape(-1))
    return Var(flat.reshape(shape), ((a, lambda g: gather(g, index)),))


def getitem(a, index) -> Var:
    a = as_var(a)
    flat_index = np.arange(a.size).reshape(a.shape)[index]
    return gather(a, flat_index)


def concat_flat(parts: Sequence[Var]) -> Var:
    """Concatenate the flattened parts into one vector."""
    parts = [as_var(p) for p in parts]
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)
    val = np.concatenate([p.value.reshape(-1) for p in parts])
    links = []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        links.append((p, _slice_back(int(lo), int(hi), p.shape)))
    return Var(val, tuple(links))


def _slice_back(lo: int, hi: int, shape):
    return lambda g: reshape(getitem(g, slice(lo, hi)), shape)


# -- composites -------------------------------------------------------------

def log_softmax(z: Var, axis: int = -1) -> Var:
    z = as_var(z)
    shift = np.max(z.value, axis=axis, keepdims=True)
    shifted = sub(z, shift)
    return sub(shifted, log(sum_(exp(shifted), axis=axis, keepdims=True)))


def softmax(z: Var, axis: int = -1) -> Var:
    return exp(log_softmax(z, axis=axis))


def dot(a, b) -> Var:
    return sum_(mul(a, b))


# -- differentiation --------------------------------------------------------

def _topo(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(
    output: Var,
    inputs: Sequence[Var],
    create_graph: bool = False,
    seed: Var | Array | None = None,
) -> list[Var]:
    """Cotangents of ``output`` with respect to each of ``inputs``.

    ``seed`` defaults to ones (a scalar output gives the ordinary gradient).
    With ``create_graph`` the returned Vars stay connected to the graph and
    can be differentiated again; otherwise they are detached constants.
    Inputs that ``output`` does not depend on get zero cotangents.
    """
    if seed is None:
        seed = np.ones_like(output.value)
    seed = as_var(seed)
    order = _topo(output)
    cot: dict[int, Var] = {id(output): seed}
    for node in reversed(order):
        g = cot.pop(id(node), None)
        if g is None or not node.parents:
            if g is not None:
                cot[id(node)] = g
            continue
        if not create_graph and g.requires_grad:
            g = Var(g.value, requires_grad=False)
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if not create_graph:
                contrib = Var(contrib.value, requires_grad=False)
            prev = cot.get(id(parent))
            cot[id(parent)] = contrib if prev is None else add(prev, contrib)
        # non-leaf inputs keep their cotangent for the caller
        if any(node is x for x in inputs):
            cot[id(node)] = g
    out = []
    for x in inputs:
        g = cot.get(id(x))
        if g is None:
            g = Var(np.zeros_like(x.value), requires_grad=False)
        elif not create_graph:
            g = Var(g.value, requires_grad=False)
        out.append(g)
    return out
