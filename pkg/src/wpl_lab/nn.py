"""Small feed-forward classifier helpers on top of the autodiff graph."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Graph, Node, backward, forward
from .params import ParameterStore


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Glorot-normal weights, zero bias."""
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(scale=std, size=(fan_in, fan_out)), np.zeros(fan_out)


def add_dense(store: ParameterStore, rng, prefix: str, fan_in: int, fan_out: int) -> tuple[str, str]:
    w, b = init_dense(rng, fan_in, fan_out)
    store.add(f"{prefix}.W", w)
    store.add(f"{prefix}.b", b)
    return f"{prefix}.W", f"{prefix}.b"


@dataclass
class Classifier:
    """A graph with input ``x``, one-hot target ``y``, logits and cross-entropy nodes."""

    graph: Graph
    logits: Node
    task: Node
    param_ids: tuple[str, ...]

    def bindings(self, store: ParameterStore, x, y_onehot=None) -> dict:
        b = {pid: store[pid] for pid in self.param_ids}
        b["x"] = x
        if y_onehot is not None:
            b["y"] = y_onehot
        return b

    def predict(self, store: ParameterStore, x) -> np.ndarray:
        return forward(self.graph, self.bindings(store, x), outputs=self.logits)[self.logits]

    def accuracy(self, store: ParameterStore, x, labels) -> float:
        return float(np.mean(np.argmax(self.predict(store, x), axis=1) == labels))

    def loss_and_grads(self, store: ParameterStore, x, y_onehot, node: Node | None = None, extra=None):
        node = node or self.task
        b = self.bindings(store, x, y_onehot)
        if extra:
            b.update(extra)
        vals = forward(self.graph, b, outputs=node)
        return vals, backward(self.graph, vals, node)


def mlp_classifier(layers: Sequence[tuple[str, str]], activation: str = "tanh") -> Classifier:
    g = Graph()
    h = g.input("x")
    for i, (w, b) in enumerate(layers):
        h = g.add(g.matmul(h, g.param(w)), g.param(b))
        if i < len(layers) - 1:
            h = g.activation(h, activation)
    task = g.softmax_cross_entropy(h, g.input("y"))
    ids = tuple(p for pair in layers for p in pair)
    return Classifier(g, h, task, ids)


def sgd_step(store: ParameterStore, grads: Mapping[str, np.ndarray], lr: float) -> None:
    for pid, g in grads.items():
        store[pid] = store[pid] - lr * g


def minibatches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
