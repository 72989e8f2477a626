"""Desk-scale weight-sharing architecture search.

The supernet is a DAG of ``nodes`` hidden nodes.  Node ``i`` (1-based) reads
from one predecessor ``j < i`` (``j = 0`` is the input projection) through an
edge ``j -> i`` with its own weight matrix, then applies one activation.  Every
architecture that picks the same edge uses the same parameters.  Nodes that no
other node reads from are averaged and fed to a shared output layer.

Each search epoch samples ``archs_per_epoch`` architectures and trains them one
after another for ``batches`` SGD steps each.  ``err1`` is an architecture's
error right after its own training; ``err2`` is its error at the end of the
epoch, after the others have overwritten shared weights.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ACTIVATIONS, Graph
from .data import Dataset, SyntheticSpec, make_synthetic, one_hot
from .fisher import FisherState, empirical_fisher
from .nn import Classifier, init_dense, sgd_step
from .params import ParameterStore
from .wpl import WplConfig, alpha_at, wpl_loss

log = logging.getLogger(__name__)

NAS_CSV_COLUMNS = ("epoch", "mean_diff", "top5_diff", "max_diff", "mean_reward", "alpha", "fisher_flushed")


@dataclass(frozen=True)
class SearchSpace:
    nodes: int = 4
    width: int = 16
    ops: tuple[str, ...] = ACTIVATIONS

    def __post_init__(self):
        if self.nodes < 1 or self.width < 1:
            raise ValueError("need at least one node of positive width")
        bad = [op for op in self.ops if op not in ACTIVATIONS]
        if bad or not self.ops:
            raise ValueError(f"unsupported ops {bad}")

    def decision_sizes(self) -> list[int]:
        """Arm counts in decision order: (op, predecessor) for each node."""
        out = []
        for i in range(1, self.nodes + 1):
            out += [len(self.ops), i]
        return out

    def edge_slots(self) -> list[tuple[int, int]]:
        return [(j, i) for i in range(1, self.nodes + 1) for j in range(i)]


def edge_ids(j: int, i: int) -> tuple[str, str]:
    return f"edge{j}->{i}.W", f"edge{j}->{i}.b"


IN_IDS = ("in.W", "in.b")
OUT_IDS = ("out.W", "out.b")


@dataclass(frozen=True)
class ArchSpec:
    """``nodes[i-1] = (op index, predecessor index)`` for node ``i``."""

    nodes: tuple[tuple[int, int], ...]

    def validate(self, space: SearchSpace) -> None:
        if len(self.nodes) != space.nodes:
            raise ValueError(f"expected {space.nodes} nodes, got {len(self.nodes)}")
        for i, (op, pred) in enumerate(self.nodes, start=1):
            if not 0 <= op < len(space.ops):
                raise ValueError(f"node {i}: op index {op} out of range")
            if not 0 <= pred < i:
                raise ValueError(f"node {i}: predecessor {pred} must be in [0, {i})")

    @classmethod
    def from_decisions(cls, decisions: Sequence[int]) -> "ArchSpec":
        d = [int(v) for v in decisions]
        return cls(tuple((d[2 * k], d[2 * k + 1]) for k in range(len(d) // 2)))

    def decisions(self) -> list[int]:
        return [v for pair in self.nodes for v in pair]

    def loose_ends(self) -> list[int]:
        used = {pred for _, pred in self.nodes}
        return [i for i in range(1, len(self.nodes) + 1) if i not in used]

    def param_ids(self) -> list[str]:
        ids = list(IN_IDS)
        for i, (_, pred) in enumerate(self.nodes, start=1):
            ids += edge_ids(pred, i)
        return ids + list(OUT_IDS)


def init_supernet(space: SearchSpace, input_dim: int, num_classes: int, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    w, b = init_dense(rng, input_dim, space.width)
    store.add(IN_IDS[0], w)
    store.add(IN_IDS[1], b)
    for j, i in space.edge_slots():
        w, b = init_dense(rng, space.width, space.width)
        wid, bid = edge_ids(j, i)
        store.add(wid, w)
        store.add(bid, b)
    w, b = init_dense(rng, space.width, num_classes)
    store.add(OUT_IDS[0], w)
    store.add(OUT_IDS[1], b)
    return store


def build_classifier(space: SearchSpace, arch: ArchSpec) -> Classifier:
    arch.validate(space)
    g = Graph()
    x = g.input("x")
    h = [g.tanh(g.add(g.matmul(x, g.param(IN_IDS[0])), g.param(IN_IDS[1])))]
    for i, (op, pred) in enumerate(arch.nodes, start=1):
        wid, bid = edge_ids(pred, i)
        h.append(g.activation(g.add(g.matmul(h[pred], g.param(wid)), g.param(bid)), space.ops[op]))
    ends = arch.loose_ends()
    acc = h[ends[0]]
    for i in ends[1:]:
        acc = g.add(acc, h[i])
    if len(ends) > 1:
        acc = g.scale(acc, 1.0 / len(ends))
    logits = g.add(g.matmul(acc, g.param(OUT_IDS[0])), g.param(OUT_IDS[1]))
    task = g.softmax_cross_entropy(logits, g.input("y"))
    return Classifier(g, logits, task, tuple(arch.param_ids()))


# --- controller -----------------------------------------------------------


@dataclass
class ControllerState:
    """Independent categorical policy per decision, trained with REINFORCE."""

    logits: list[np.ndarray]
    lr: float = 0.1
    baseline: float | None = None
    baseline_decay: float = 0.95

    @classmethod
    def uniform(cls, space: SearchSpace, lr: float = 0.1, baseline_decay: float = 0.95) -> "ControllerState":
        return cls([np.zeros(n) for n in space.decision_sizes()], lr, None, baseline_decay)

    def probs(self) -> list[np.ndarray]:
        out = []
        for z in self.logits:
            e = np.exp(z - z.max())
            out.append(e / e.sum())
        return out

    def log_prob(self, arch: ArchSpec) -> float:
        return float(sum(np.log(p[d]) for p, d in zip(self.probs(), arch.decisions())))

    def greedy(self) -> ArchSpec:
        return ArchSpec.from_decisions([int(np.argmax(z)) for z in self.logits])


def sample_architecture(controller: ControllerState, rng: np.random.Generator) -> tuple[ArchSpec, float]:
    """Draw one decision per categorical; returns the arch and its log-probability."""
    probs = controller.probs()
    decisions = [int(rng.choice(len(p), p=p)) for p in probs]
    logp = float(sum(np.log(p[d]) for p, d in zip(probs, decisions)))
    return ArchSpec.from_decisions(decisions), logp


def controller_update(controller: ControllerState, samples: Sequence[tuple[ArchSpec, float]]) -> np.ndarray:
    """One policy-gradient ascent step on the mean of ``(reward - baseline) * grad log p``.

    ``samples`` holds ``(arch, reward)`` pairs.  The baseline is the EMA of past
    mean rewards (first call: the current mean).  Returns the flattened step.
    """
    if not samples:
        return np.zeros(0)
    rewards = np.array([r for _, r in samples], dtype=np.float64)
    if controller.baseline is None:
        controller.baseline = float(rewards.mean())
    probs = controller.probs()
    steps = [np.zeros_like(z) for z in controller.logits]
    for (arch, r) in samples:
        adv = r - controller.baseline
        for k, (p, d) in enumerate(zip(probs, arch.decisions())):
            grad = -p.copy()
            grad[d] += 1.0
            steps[k] += adv * grad
    steps = [controller.lr * s / len(samples) for s in steps]
    for z, s in zip(controller.logits, steps):
        z += s
    controller.baseline = controller.baseline_decay * controller.baseline + (1 - controller.baseline_decay) * float(rewards.mean())
    return np.concatenate(steps)


# --- forgetting statistics ------------------------------------------------


@dataclass
class EpochForgettingStats:
    err1: list[float]
    err2: list[float]
    mean_diff: float = 0.0
    top5_diff: float = 0.0
    max_diff: float = 0.0

    def __post_init__(self):
        self.mean_diff, self.top5_diff, self.max_diff = forgetting_aggregates(self.err1, self.err2)

    @property
    def diffs(self) -> list[float]:
        return [b - a for a, b in zip(self.err1, self.err2)]


def forgetting_aggregates(err1: Sequence[float], err2: Sequence[float], top: int = 5) -> tuple[float, float, float]:
    """Mean, mean over the ``top`` lowest-err1 architectures, and max of ``err2 - err1``.

    With fewer than ``top`` architectures the second aggregate uses all of them.
    """
    if len(err1) != len(err2):
        raise ValueError("err1 and err2 lengths differ")
    if not err1:
        return 0.0, 0.0, 0.0
    diff = np.asarray(err2, dtype=np.float64) - np.asarray(err1, dtype=np.float64)
    best = np.argsort(np.asarray(err1), kind="stable")[:top]
    return float(diff.mean()), float(diff[best].mean()), float(diff.max())


# --- search ---------------------------------------------------------------


def default_search_wpl() -> WplConfig:
    return WplConfig(alpha0=10.0, warmup_epochs=3, post_warmup_epochs=27)


@dataclass
class SearchConfig:
    space: SearchSpace = field(default_factory=SearchSpace)
    dataset: dict = field(default_factory=lambda: {"kind": "arcs", "noise": 0.1})
    data_seed: int = 0
    epochs: int = 30
    archs_per_epoch: int = 8
    batches: int = 20
    batch_size: int = 32
    lr: float = 0.1
    controller_lr: float = 0.1
    eval_size: int = 200  # fixed held-out batch for err1/err2
    reward_size: int = 200  # fixed held-out batch for rewards
    fisher_samples: int = 64
    fisher_batch_size: int = 8
    eta: float = 0.9
    flush_period: int = 3
    use_wpl: bool = True
    clip_anchor_weight: bool = True
    wpl: WplConfig = field(default_factory=lambda: default_search_wpl())
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.space, dict):
            self.space = SearchSpace(**{k: tuple(v) if k == "ops" else v for k, v in self.space.items()})
        if isinstance(self.wpl, dict):
            self.wpl = WplConfig(**{**asdict(default_search_wpl()), **self.wpl})
        if min(self.epochs, self.archs_per_epoch) < 1 or self.batches < 0:
            raise ValueError("epochs and archs_per_epoch must be positive, batches nonnegative")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["space"]["ops"] = list(self.space.ops)
        return d


@dataclass
class SearchResult:
    best: ArchSpec
    best_accuracy: float
    epochs: list[EpochForgettingStats]
    rewards: list[float]
    alphas: list[float]
    flushed: list[bool]
    archs: list[list[ArchSpec]]
    store: ParameterStore
    controller: ControllerState

    def rows(self) -> list[tuple]:
        return [
            (e, s.mean_diff, s.top5_diff, s.max_diff, r, a, int(f))
            for e, (s, r, a, f) in enumerate(zip(self.epochs, self.rewards, self.alphas, self.flushed))
        ]

    def post_warmup_mean_diff(self, warmup: int) -> float:
        return float(np.mean([s.mean_diff for s in self.epochs[warmup:]]))

    def post_warmup_max_diff(self, warmup: int) -> float:
        return float(np.mean([s.max_diff for s in self.epochs[warmup:]]))


class _Batches:
    """Endless shuffled mini-batch stream over the training set."""

    def __init__(self, rng: np.random.Generator, n: int, batch_size: int):
        self.rng, self.n, self.bs = rng, n, batch_size
        self.order, self.pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self.pos + self.bs > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return idx


class Supernet:
    """Compiled per-architecture graphs plus their losses, cached by ArchSpec."""

    def __init__(self, space: SearchSpace, lam: float, with_anchor: bool = True):
        self.space, self.lam, self.with_anchor = space, lam, with_anchor
        self._cache: dict[ArchSpec, tuple] = {}

    def get(self, arch: ArchSpec):
        if arch not in self._cache:
            clf = build_classifier(self.space, arch)
            loss = wpl_loss(clf.graph, clf.task, (), clf.param_ids, self.lam, with_anchor=self.with_anchor)
            self._cache[arch] = (clf, loss)
        return self._cache[arch]


def error_rate(clf: Classifier, store: ParameterStore, x, y) -> float:
    return 1.0 - clf.accuracy(store, x, y)


def train_sampled(arch: ArchSpec, store: ParameterStore, fisher: FisherState, cfg: SearchConfig,
                  net: Supernet, data: Dataset, stream: _Batches, alpha: float) -> float:
    """Train ``arch`` for ``cfg.batches`` steps, then return err1 and refresh Fisher/anchor.

    With ``alpha == 0`` (warm-up, or WPL disabled) the anchor weights are all
    zero, so the anchor term adds exact zeros to the loss and its gradient.
    """
    clf, loss = net.get(arch)
    ids = clf.param_ids
    y_train = one_hot(data.y_train, data.num_classes)
    cap = 1.0 / cfg.lr if cfg.clip_anchor_weight else None
    if fisher.anchor is None:
        fisher.set_anchor(store.snapshot())
    extra = loss.feed(fisher, alpha, store.values_for(ids), max_weight=cap)
    for _ in range(cfg.batches):
        idx = stream.next()
        _, grads = clf.loss_and_grads(store, data.x_train[idx], y_train[idx], node=loss.total, extra=extra)
        sgd_step(store, grads, cfg.lr)
    xe, ye = data.x_val[: cfg.eval_size], data.y_val[: cfg.eval_size]
    err1 = error_rate(clf, store, xe, ye)
    # Fisher on a fixed validation slice disjoint from the err/reward batches
    lo = cfg.eval_size + cfg.reward_size
    xf, yf = data.x_val[lo : lo + cfg.fisher_samples], one_hot(data.y_val[lo : lo + cfg.fisher_samples], data.num_classes)
    fresh = empirical_fisher(lambda x, y: clf.loss_and_grads(store, x, y)[1], xf, yf, cfg.fisher_batch_size, keys=ids)
    fisher.momentum_update(fresh)
    fisher.set_anchor(store.snapshot())
    return err1


def epoch_end_eval(archs: Sequence[ArchSpec], err1: Sequence[float], store: ParameterStore,
                   net: Supernet, x, y) -> EpochForgettingStats:
    err2 = [error_rate(net.get(a)[0], store, x, y) for a in archs]
    return EpochForgettingStats(list(err1), err2)


def load_search_data(cfg: SearchConfig) -> Dataset:
    spec = dict(cfg.dataset)
    kind = spec.pop("kind", "arcs")
    if kind == "idx":
        from .data import idx_dataset

        data = idx_dataset(**spec)
    else:
        data = make_synthetic(SyntheticSpec(kind=kind, **spec), cfg.data_seed)
    need = cfg.eval_size + cfg.reward_size + cfg.fisher_samples
    if len(data.x_val) < need:
        raise ValueError(f"validation split has {len(data.x_val)} rows, search needs {need}")
    return data


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "controller", "batches")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def search(cfg: SearchConfig, data: Dataset | None = None) -> SearchResult:
    data = data or load_search_data(cfg)
    rng = _streams(cfg.seed)
    space = cfg.space
    store = init_supernet(space, data.input_dim, data.num_classes, rng["init"])
    controller = ControllerState.uniform(space, cfg.controller_lr)
    warmup = cfg.wpl.warmup_epochs
    # flushes then land on warmup, warmup + period, ...
    fisher = FisherState(eta=cfg.eta, flush_period=cfg.flush_period, last_flush_epoch=warmup - cfg.flush_period)
    net = Supernet(space, cfg.wpl.lam, with_anchor=cfg.use_wpl)
    stream = _Batches(rng["batches"], len(data.x_train), cfg.batch_size)
    xe, ye = data.x_val[: cfg.eval_size], data.y_val[: cfg.eval_size]
    xr, yr = data.x_val[cfg.eval_size : cfg.eval_size + cfg.reward_size], data.y_val[cfg.eval_size : cfg.eval_size + cfg.reward_size]

    stats, rewards, alphas, flushed, history = [], [], [], [], []
    for epoch in range(cfg.epochs):
        alpha = alpha_at(cfg.wpl, epoch) if cfg.use_wpl else 0.0
        flushed.append(epoch >= warmup and fisher.maybe_flush(epoch))
        archs, err1 = [], []
        for _ in range(cfg.archs_per_epoch):
            arch, _ = sample_architecture(controller, rng["controller"])
            err1.append(train_sampled(arch, store, fisher, cfg, net, data, stream, alpha))
            archs.append(arch)
        st = epoch_end_eval(archs, err1, store, net, xe, ye)
        r = [1.0 - error_rate(net.get(a)[0], store, xr, yr) for a in archs]
        controller_update(controller, list(zip(archs, r)))
        stats.append(st)
        rewards.append(float(np.mean(r)))
        alphas.append(alpha)
        history.append(archs)
        log.info("epoch %d mean_diff %.4f reward %.4f alpha %g", epoch, st.mean_diff, rewards[-1], alpha)

    candidates = list(dict.fromkeys(history[-1] + [controller.greedy()]))
    scored = [(1.0 - error_rate(net.get(a)[0], store, data.x_val, data.y_val), i) for i, a in enumerate(candidates)]
    best_acc, best_i = max(scored, key=lambda t: (t[0], -t[1]))
    return SearchResult(candidates[best_i], best_acc, stats, rewards, alphas, flushed, history, store, controller)
