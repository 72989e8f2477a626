"""Weight Plasticity Loss assembly and the alpha schedule.

The loss for the model currently being trained is

    task + lambda/2 (|theta_s|^2 + |theta_2|^2) + alpha/2 sum_i F_i (theta_s,i - anchor_i)^2

built as graph nodes so that ``backward`` produces its exact gradient.  The
epoch-dependent pieces (``alpha * F`` and the anchor values) enter as graph
inputs, so one static graph serves the whole run.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Graph, Node
from .fisher import FisherState


@dataclass
class WplConfig:
    lam: float = 1e-4
    alpha0: float = 1.0
    # "step": alpha0 for the first half of the post-warm-up budget, then alpha0 / decay.
    # "constant": alpha0 throughout.  "piecewise": values from ``breakpoints``.
    schedule: str = "step"
    decay: float = 10.0
    post_warmup_epochs: int = 20
    breakpoints: list[tuple[int, float]] = field(default_factory=list)
    warmup_epochs: int = 0
    sigma2: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be nonnegative")
        if self.schedule not in ("step", "constant", "piecewise"):
            raise ValueError(f"unknown alpha schedule {self.schedule!r}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")
        if self.decay <= 0:
            raise ValueError("decay must be positive")
        if any(v < 0 for _, v in self.breakpoints):
            raise ValueError("alpha breakpoints must be nonnegative")
        self.breakpoints = sorted((int(e), float(v)) for e, v in self.breakpoints)


def alpha_at(cfg: WplConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if epoch < cfg.warmup_epochs:
        return 0.0
    k = epoch - cfg.warmup_epochs
    if cfg.schedule == "constant":
        return cfg.alpha0
    if cfg.schedule == "step":
        return cfg.alpha0 if k < cfg.post_warmup_epochs / 2 else cfg.alpha0 / cfg.decay
    # piecewise: breakpoints are (post-warm-up epoch, value); alpha0 before the first one
    value = cfg.alpha0
    for start, v in cfg.breakpoints:
        if k >= start:
            value = v
    return value


@dataclass(frozen=True)
class WplBreakdown:
    task_loss: float
    l2_term: float
    anchor_term: float
    total: float


def _sum(graph: Graph, nodes: Sequence[Node]) -> Node | None:
    acc = None
    for n in nodes:
        acc = n if acc is None else graph.add(acc, n)
    return acc


@dataclass
class WplLoss:
    """Node handles for one assembled loss; ``feed`` produces the extra bindings."""

    task: Node
    l2: Node | None
    anchor: Node | None
    total: Node
    theta2: tuple[str, ...]
    theta_s: tuple[str, ...]
    lam: float

    @staticmethod
    def weight_key(pid: str) -> str:
        return f"wpl.weight[{pid}]"

    @staticmethod
    def anchor_key(pid: str) -> str:
        return f"wpl.anchor[{pid}]"

    def feed(self, fisher: FisherState | None, alpha: float, like: Mapping[str, np.ndarray],
             max_weight: float | None = None) -> dict[str, np.ndarray]:
        """Bindings for the anchor inputs: ``alpha * F`` and the anchor values.

        ``like`` supplies the live parameter arrays (for shapes).  Parameters
        with no Fisher entry get zero weight.  ``max_weight`` clips ``alpha * F``
        elementwise; with ``max_weight = 1 / lr`` an SGD step on the anchor term
        never overshoots the anchor.
        """
        if self.anchor is None:
            return {}
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if fisher is None or fisher.anchor is None:
            raise KeyError("WPL needs a Fisher state with an anchor snapshot")
        missing = [p for p in self.theta_s if p not in fisher.anchor]
        if missing:
            raise KeyError(f"anchor snapshot does not cover {missing}")
        out = {}
        for pid in self.theta_s:
            w = alpha * fisher.get(pid, like[pid])
            out[self.weight_key(pid)] = w if max_weight is None else np.minimum(w, max_weight)
            out[self.anchor_key(pid)] = fisher.anchor[pid]
        return out

    def breakdown(self, values: Mapping[Node, np.ndarray]) -> WplBreakdown:
        task = float(values[self.task])
        l2 = 0.0 if self.l2 is None else float(values[self.l2])
        anchor = 0.0 if self.anchor is None else float(values[self.anchor])
        return WplBreakdown(task, l2, anchor, task + l2 + anchor)


def wpl_loss(
    graph: Graph,
    task_loss: Node,
    theta2: Sequence[str],
    theta_s: Sequence[str],
    lam: float,
    with_anchor: bool = True,
) -> WplLoss:
    """Append the regularizers to ``graph`` and return the node handles.

    ``with_anchor=False`` gives the plain loss (task + L2) used as the
    no-WPL baseline; the L2 part is identical in both variants.  Summation
    order is always task, L2, anchor.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    theta2, theta_s = tuple(theta2), tuple(theta_s)
    total = task_loss
    l2 = None
    if lam > 0 and (theta_s or theta2):
        sq = _sum(graph, [graph.sum_of_squares(graph.param(p)) for p in theta_s + theta2])
        l2 = graph.scale(sq, lam / 2.0)
        total = graph.add(total, l2)
    anchor = None
    if with_anchor and theta_s:
        terms = [
            graph.weighted_sum_of_squares(
                graph.param(p), graph.input(WplLoss.weight_key(p)), graph.input(WplLoss.anchor_key(p))
            )
            for p in theta_s
        ]
        anchor = graph.scale(_sum(graph, terms), 0.5)
        total = graph.add(total, anchor)
    return WplLoss(task_loss, l2, anchor, total, theta2, theta_s, float(lam))


def wpl_value(
    task_loss: float,
    theta2: Mapping[str, np.ndarray],
    theta_s: Mapping[str, np.ndarray],
    fisher: FisherState,
    cfg: WplConfig,
    epoch: int,
) -> WplBreakdown:
    """Direct numpy evaluation of the loss terms (no graph)."""
    alpha = alpha_at(cfg, epoch)
    l2 = 0.5 * cfg.lam * (sum(float(np.sum(v * v)) for v in theta_s.values()) + sum(float(np.sum(v * v)) for v in theta2.values()))
    anchor = 0.0
    if theta_s:
        if fisher.anchor is None:
            raise KeyError("fisher state has no anchor")
        for pid, v in theta_s.items():
            d = v - fisher.anchor[pid]
            anchor += float(np.sum(fisher.get(pid, v) * d * d))
        anchor *= 0.5 * alpha
    return WplBreakdown(task_loss, l2, anchor, task_loss + l2 + anchor)
