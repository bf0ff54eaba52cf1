"""Reverse-mode differentiation tape over numpy values.

A :class:`DualTape` records every operation of one forward computation as a
node holding its value, its parent nodes, a forward closure and a
vector-Jacobian closure.  :meth:`DualTape.gradients` sweeps the nodes in
reverse and accumulates adjoints; :meth:`DualTape.replay` re-executes the
forward closures from the leaves.

Values are float64 scalars or arrays and follow numpy broadcasting.  Plain
numbers and arrays mixed into an expression are treated as constants.
"""
from __future__ import annotations

import math

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    grad = np.asarray(grad, dtype=float)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Node:
    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: "DualTape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape._values[self.index]

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.mul(self, -1.0)

    def __getitem__(self, key):
        return self.tape.getitem(self, key)

    def __repr__(self):
        return f"Node({self.index}, shape={self.shape})"


def _val(x):
    return x.value if isinstance(x, Node) else x


class DualTape:
    def __init__(self):
        self._values: list = []
        self._parents: list[tuple[int, ...]] = []
        self._fwd: list = []
        self._vjp: list = []
        self._leaves: list[int] = []

    def __len__(self):
        return len(self._values)

    def _push(self, value, parents, fwd, vjp) -> Node:
        self._values.append(value)
        self._parents.append(tuple(p.index for p in parents))
        self._fwd.append(fwd)
        self._vjp.append(vjp)
        return Node(self, len(self._values) - 1)

    def leaf(self, value) -> Node:
        value = np.array(value, dtype=float)
        node = self._push(value, (), None, None)
        self._leaves.append(node.index)
        return node

    # ------------------------------------------------------------------ ops

    def _binary(self, a, b, fwd, grad_a, grad_b) -> Node:
        """``grad_a(g, av, bv)`` / ``grad_b`` give adjoints before unbroadcasting."""
        nodes, sides = [], []
        if isinstance(a, Node):
            nodes.append(a)
            sides.append(0)
        if isinstance(b, Node):
            nodes.append(b)
            sides.append(1)
        ca, cb = _val(a), _val(b)

        def forward(vals):
            it = iter(vals)
            av = next(it) if 0 in sides else ca
            bv = next(it) if 1 in sides else cb
            return fwd(av, bv)

        def vjp(g, vals, out):
            it = iter(vals)
            av = next(it) if 0 in sides else ca
            bv = next(it) if 1 in sides else cb
            res = []
            if 0 in sides:
                res.append(_unbroadcast(grad_a(g, av, bv, out), np.shape(av)))
            if 1 in sides:
                res.append(_unbroadcast(grad_b(g, av, bv, out), np.shape(bv)))
            return res

        return self._push(fwd(ca, cb), nodes, forward, vjp)

    def add(self, a, b):
        return self._binary(a, b, lambda x, y: x + y,
                            lambda g, x, y, o: g, lambda g, x, y, o: g)

    def sub(self, a, b):
        return self._binary(a, b, lambda x, y: x - y,
                            lambda g, x, y, o: g, lambda g, x, y, o: -g)

    def mul(self, a, b):
        return self._binary(a, b, lambda x, y: x * y,
                            lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)

    def div(self, a, b):
        return self._binary(a, b, lambda x, y: x / y,
                            lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)

    def _unary(self, a: Node, fwd, grad) -> Node:
        return self._push(fwd(a.value), (a,), lambda vals: fwd(vals[0]),
                          lambda g, vals, out: [grad(g, vals[0], out)])

    def exp(self, a):
        return self._unary(a, np.exp, lambda g, x, o: g * o)

    def expm1(self, a):
        return self._unary(a, np.expm1, lambda g, x, o: g * (o + 1.0))

    def log(self, a):
        return self._unary(a, np.log, lambda g, x, o: g / x)

    def sqrt(self, a):
        return self._unary(a, np.sqrt, lambda g, x, o: 0.5 * g / o)

    def square(self, a):
        return self._unary(a, np.square, lambda g, x, o: 2.0 * g * x)

    def sum(self, a, axis=None):
        def fwd(x):
            return np.sum(x, axis=axis)

        def grad(g, x, o):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, np.shape(x)).copy()

        return self._unary(a, fwd, grad)

    def mean(self, a, axis=None):
        n = np.size(a.value) if axis is None else np.shape(a.value)[axis]
        return self.mul(self.sum(a, axis), 1.0 / n)

    def getitem(self, a, key):
        def grad(g, x, o):
            out = np.zeros(np.shape(x))
            np.add.at(out, key, g)
            return out

        return self._unary(a, lambda x: x[key], grad)

    def huber(self, a, delta: float):
        """Elementwise Huber: ``e^2/2`` for ``|e| <= delta`` else ``delta (|e| - delta/2)``."""

        def fwd(x):
            ax = np.abs(x)
            return np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))

        return self._unary(a, fwd, lambda g, x, o: g * np.clip(x, -delta, delta))

    def complement(self, items: list) -> Node | float:
        """Correctly rounded ``1 - sum(items)`` of scalar nodes."""
        nodes = [n for n in items if isinstance(n, Node)]
        consts = [float(n) for n in items if not isinstance(n, Node)]

        def fwd(vals):
            return np.float64(-math.fsum([*map(float, vals), *consts, -1.0]))

        if not nodes:
            return float(fwd([]))
        return self._push(fwd([n.value for n in nodes]), nodes, fwd,
                          lambda g, vals, out: [-g] * len(vals))

    def field(self, fld, x, t) -> Node:
        """Model evaluation ``fld(x, t)`` using the field's closed-form VJP."""
        nodes = [n for n in (x, t) if isinstance(n, Node)]
        cx, ct = _val(x), _val(t)
        x_is, t_is = isinstance(x, Node), isinstance(t, Node)

        def unpack(vals):
            it = iter(vals)
            xv = next(it) if x_is else cx
            tv = next(it) if t_is else ct
            return xv, float(tv)

        def fwd(vals):
            return fld._eval(*unpack(vals))

        def vjp(g, vals, out):
            xv, tv = unpack(vals)
            gx, gt = fld._vjp(xv, tv, g)
            res = []
            if x_is:
                res.append(gx)
            if t_is:
                res.append(np.float64(gt))
            return res

        return self._push(fld._eval(np.asarray(cx, dtype=float), float(ct)), nodes, fwd, vjp)

    # ------------------------------------------------------------------ sweeps

    def gradients(self, output: Node, wrt: list[Node]) -> list[np.ndarray]:
        """Adjoints of ``output`` (seeded with ones) for each node in ``wrt``.

        Nodes that do not influence ``output`` get exact zeros.
        """
        adj: dict[int, np.ndarray] = {output.index: np.ones(np.shape(output.value))}
        for idx in range(output.index, -1, -1):
            g = adj.get(idx)
            if g is None or self._vjp[idx] is None:
                continue
            parents = self._parents[idx]
            vals = [self._values[p] for p in parents]
            for p, gp in zip(parents, self._vjp[idx](g, vals, self._values[idx])):
                if p in adj:
                    adj[p] = adj[p] + gp
                else:
                    adj[p] = gp
        return [np.asarray(adj.get(w.index, np.zeros(np.shape(w.value))), dtype=float)
                for w in wrt]

    def replay(self, leaf_values: dict | None = None) -> list:
        """Recompute every node value from the leaves; returns the new value list."""
        values = list(self._values)
        for idx, val in (leaf_values or {}).items():
            values[idx] = np.array(val, dtype=float)
        for idx, fwd in enumerate(self._fwd):
            if fwd is None:
                continue
            values[idx] = fwd([values[p] for p in self._parents[idx]])
        return values
