"""Static-graph reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` is built once per model and then evaluated many times with
different bindings.  Values live outside the graph, so a graph can be shared
read-only between threads.

    g = Graph()
    x, w = g.input("x"), g.param("w")
    loss = g.sum_of_squares(g.matmul(x, w))
    values = forward(g, {"x": X, "w": W})
    grads = backward(g, values, loss)    # {"w": dloss/dw}
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

Tensor = np.ndarray
GradientMap = dict[str, np.ndarray]

ACTIVATIONS = ("identity", "tanh", "relu", "sigmoid")


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class UnboundNodeError(AutodiffError, KeyError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


@dataclass(frozen=True)
class Node:
    index: int
    op: str
    inputs: tuple[int, ...] = ()
    name: str | None = None
    attr: object = None

    def __repr__(self) -> str:
        label = self.name if self.name is not None else self.attr
        return f"Node({self.index}, {self.op}{'' if label is None else ':' + str(label)})"


class Graph:
    """Append-only list of nodes; insertion order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._leaf_names: dict[str, Node] = {}

    def _push(self, op: str, inputs=(), name=None, attr=None) -> Node:
        for i in inputs:
            if not isinstance(i, Node) or i.index >= len(self.nodes) or self.nodes[i.index] is not i:
                raise ValueError(f"{i!r} does not belong to this graph")
        node = Node(len(self.nodes), op, tuple(i.index for i in inputs), name, attr)
        self.nodes.append(node)
        return node

    def _leaf(self, op: str, name: str) -> Node:
        if name in self._leaf_names:
            existing = self._leaf_names[name]
            if existing.op != op:
                raise ValueError(f"{name!r} already declared as {existing.op}")
            return existing
        node = self._push(op, name=name)
        self._leaf_names[name] = node
        return node

    def input(self, name: str) -> Node:
        return self._leaf("input", name)

    def param(self, name: str) -> Node:
        return self._leaf("param", name)

    def matmul(self, a: Node, b: Node) -> Node:
        return self._push("matmul", (a, b))

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum; ``b`` may also be a bias row broadcast over ``a``'s rows."""
        return self._push("add", (a, b))

    def activation(self, a: Node, kind: str) -> Node:
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        return self._push("act", (a,), attr=kind)

    def relu(self, a: Node) -> Node:
        return self.activation(a, "relu")

    def tanh(self, a: Node) -> Node:
        return self.activation(a, "tanh")

    def sigmoid(self, a: Node) -> Node:
        return self.activation(a, "sigmoid")

    def softmax_cross_entropy(self, logits: Node, target: Node) -> Node:
        """Mean over rows of ``-sum(target * log_softmax(logits))``."""
        return self._push("xent", (logits, target))

    def scale(self, a: Node, c: float) -> Node:
        return self._push("scale", (a,), attr=float(c))

    def sum_of_squares(self, a: Node) -> Node:
        return self._push("sumsq", (a,))

    def weighted_sum_of_squares(self, a: Node, weight: Node, anchor: Node) -> Node:
        """``sum(weight * (a - anchor) ** 2)``."""
        return self._push("wsumsq", (a, weight, anchor))

    def leaves(self, op: str) -> list[Node]:
        return [n for n in self.nodes if n.op == op]

    @property
    def params(self) -> list[Node]:
        return self.leaves("param")

    def ancestors(self, node: Node) -> list[Node]:
        """Nodes ``node`` depends on (itself included), in topological order."""
        keep = np.zeros(len(self.nodes), dtype=bool)
        keep[node.index] = True
        for n in reversed(self.nodes[: node.index + 1]):
            if keep[n.index]:
                keep[list(n.inputs)] = True
        return [n for n in self.nodes if keep[n.index]]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _rows(z) -> int:
    return 1 if z.ndim == 1 else z.shape[0]


def _eval_node(node: Node, args: list[np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "matmul":
        a, b = args
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"{node!r}: cannot multiply {a.shape} by {b.shape}")
        return a @ b
    if op == "add":
        a, b = args
        if a.shape == b.shape or (a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]):
            return a + b
        raise ShapeError(f"{node!r}: cannot add {a.shape} and {b.shape}")
    if op == "act":
        (a,) = args
        kind = node.attr
        if kind == "identity":
            return a.copy()
        if kind == "tanh":
            return np.tanh(a)
        if kind == "relu":
            return np.maximum(a, 0.0)
        return _sigmoid(a)
    if op == "xent":
        z, t = args
        if z.shape != t.shape or z.ndim not in (1, 2):
            raise ShapeError(f"{node!r}: logits {z.shape} vs target {t.shape}")
        return np.asarray(-(t * _log_softmax(z)).sum() / _rows(z))
    if op == "scale":
        return node.attr * args[0]
    if op == "sumsq":
        (a,) = args
        return np.asarray(np.sum(a * a))
    if op == "wsumsq":
        a, w, anchor = args
        if not (a.shape == w.shape == anchor.shape):
            raise ShapeError(f"{node!r}: shapes {a.shape}, {w.shape}, {anchor.shape} differ")
        d = a - anchor
        return np.asarray(np.sum(w * d * d))
    raise AutodiffError(f"unknown op {op!r}")


def forward(graph: Graph, bindings: Mapping[str, np.ndarray], outputs: Node | None = None) -> dict[Node, np.ndarray]:
    """Evaluate the nodes of ``graph``; leaves are looked up by name in ``bindings``.

    With ``outputs`` given, only that node and its ancestors are evaluated.
    """
    nodes = graph.nodes if outputs is None else graph.ancestors(outputs)
    vals: dict[int, np.ndarray] = {}
    for node in nodes:
        if node.op in ("input", "param"):
            if node.name not in bindings:
                raise UnboundNodeError(f"{node.op} {node.name!r} is not bound")
            out = np.asarray(bindings[node.name], dtype=np.float64)
        else:
            out = _eval_node(node, [vals[i] for i in node.inputs])
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite value at {node!r}")
        vals[node.index] = out
    return {node: vals[node.index] for node in nodes}


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0)


def _local_grads(node: Node, args: list[np.ndarray], out: np.ndarray, g: np.ndarray):
    op = node.op
    if op == "matmul":
        a, b = args
        return [g @ b.T, a.T @ g]
    if op == "add":
        a, b = args
        return [g, _unbroadcast(g, b.shape)]
    if op == "act":
        (a,) = args
        kind = node.attr
        if kind == "identity":
            return [g]
        if kind == "tanh":
            return [g * (1.0 - out * out)]
        if kind == "relu":
            return [g * (a > 0.0)]
        return [g * out * (1.0 - out)]
    if op == "xent":
        z, t = args
        logp = _log_softmax(z)
        n = _rows(z)
        mass = t.sum(axis=-1, keepdims=True)
        return [g * (np.exp(logp) * mass - t) / n, g * (-logp) / n]
    if op == "scale":
        return [node.attr * g]
    if op == "sumsq":
        (a,) = args
        return [g * 2.0 * a]
    if op == "wsumsq":
        a, w, anchor = args
        d = a - anchor
        ga = g * 2.0 * w * d
        return [ga, g * d * d, -ga]
    raise AutodiffError(f"unknown op {op!r}")


def backward(graph: Graph, values: Mapping[Node, np.ndarray], scalar_node: Node) -> GradientMap:
    """Reverse-mode gradient of a scalar node with respect to every reachable parameter."""
    if values[scalar_node].shape != ():
        raise ShapeError(f"{scalar_node!r} is not scalar: shape {values[scalar_node].shape}")
    order = graph.ancestors(scalar_node)
    adj: dict[int, np.ndarray] = {scalar_node.index: np.ones(())}
    for node in reversed(order):
        if node.op in ("input", "param") or node.index not in adj:
            continue
        args = [values[graph.nodes[i]] for i in node.inputs]
        local = _local_grads(node, args, values[node], adj[node.index])
        for i, gi in zip(node.inputs, local):
            adj[i] = adj[i] + gi if i in adj else gi
    grads: GradientMap = {}
    for node in order:
        if node.op == "param":
            g = adj.get(node.index)
            grads[node.name] = np.zeros_like(values[node]) if g is None else np.asarray(g, dtype=np.float64)
    return grads


def finite_diff_gradient(
    fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
) -> GradientMap:
    """Central differences ``(f(p + eps e_i) - f(p - eps e_i)) / 2 eps`` per coordinate."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads: GradientMap = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(fn(work))
            flat[i] = orig - epsilon
            lo = float(fn(work))
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(f"non-finite evaluation while perturbing {name}[{i}]")
            gflat[i] = (hi - lo) / (2.0 * epsilon)
        grads[name] = g
    return grads
