"""Two-model sequential training: model A, then model B sharing A's first layers.

B's first ``shared_layers`` layers *are* A's first layers (same parameter
ids).  With the default plan B shares all four of A's layers, A's output
layer included, and stacks two private layers on top.  After A is trained,
B is trained with plain SGD on all of its parameters, either with the plain
loss (cross-entropy + L2) or with the Weight Plasticity Loss.  A's accuracy
is tracked throughout by evaluating A's graph on the live store, so any of
A's layers left private keep their trained values.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, SyntheticSpec, idx_dataset, make_synthetic, one_hot
from .fisher import FisherState, empirical_fisher
from .nn import add_dense, minibatches, mlp_classifier, sgd_step
from .params import ParameterStore, Snapshot
from .wpl import WplBreakdown, WplConfig, alpha_at, wpl_loss

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "acc_A", "acc_B", "loss_total", "loss_task", "loss_l2", "loss_anchor", "alpha")


class LooseTargetUnreachable(RuntimeError):
    pass


def default_plan_wpl() -> WplConfig:
    return WplConfig(alpha0=100.0, schedule="constant")


@dataclass
class ExperimentPlan:
    dataset: dict = field(default_factory=lambda: {"kind": "blobs", "noise": 0.5})
    data_seed: int = 0
    hidden_a: tuple[int, ...] = (32, 32, 32)
    hidden_b: tuple[int, ...] = (32, 32, 32, 4, 32)
    shared_layers: int = 4
    activation: str = "tanh"
    convergence: str = "strict"  # or "loose"
    loose_fraction: float | None = None
    reference_accuracy: float | None = None
    lr: float = 0.1
    batch_size: int = 32
    max_epochs_a: int = 200
    patience: int = 5
    min_delta: float = 1e-4
    loose_eval_every: int = 1
    epochs_b: int = 10
    record_every: int = 25
    fisher_samples: int = 200
    fisher_batch_size: int = 1
    # cap alpha*F at 1/lr so large alpha cannot make plain SGD diverge on the anchor term
    clip_anchor_weight: bool = True
    wpl: WplConfig = field(default_factory=lambda: default_plan_wpl())
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.wpl, dict):
            self.wpl = WplConfig(**{**asdict(default_plan_wpl()), **self.wpl})
        self.hidden_a = tuple(self.hidden_a)
        self.hidden_b = tuple(self.hidden_b)
        self.validate()

    def validate(self) -> None:
        k = self.shared_layers
        depth_a, depth_b = len(self.hidden_a) + 1, len(self.hidden_b) + 1
        if not 0 <= k <= min(depth_a, depth_b):
            raise ValueError(f"shared_layers={k} must lie in [0, {min(depth_a, depth_b)}]")
        # B's first k layers are A's first k layers, so their output widths must agree
        # (A's last width is the class count, checked once the dataset is known).
        if self.hidden_a[: min(k, depth_a - 1)] != self.hidden_b[: min(k, depth_a - 1)]:
            raise ValueError("shared layers must have identical widths in A and B")
        if self.convergence not in ("strict", "loose"):
            raise ValueError(f"unknown convergence mode {self.convergence!r}")
        if self.convergence == "loose":
            if self.loose_fraction is None or not 0.0 < self.loose_fraction <= 1.0:
                raise ValueError("loose convergence needs loose_fraction in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_a"], d["hidden_b"] = list(self.hidden_a), list(self.hidden_b)
        return d


def load_dataset(plan: ExperimentPlan) -> Dataset:
    spec = dict(plan.dataset)
    kind = spec.pop("kind", "blobs")
    if kind == "idx":
        return idx_dataset(**spec)
    return make_synthetic(SyntheticSpec(kind=kind, **spec), plan.data_seed)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init_a", "order_a", "init_b", "order_b")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def _layer_ids(prefix: str, n: int) -> list[tuple[str, str]]:
    return [(f"{prefix}.layer{i}.W", f"{prefix}.layer{i}.b") for i in range(n)]


def a_layers(plan: ExperimentPlan):
    return _layer_ids("A", len(plan.hidden_a) + 1)


def b_layers(plan: ExperimentPlan):
    k = plan.shared_layers
    own = _layer_ids("B", len(plan.hidden_b) + 1)
    return a_layers(plan)[:k] + own[k:]


def shared_ids(plan: ExperimentPlan) -> list[str]:
    return [p for pair in a_layers(plan)[: plan.shared_layers] for p in pair]


@dataclass
class ModelAResult:
    store: ParameterStore
    snapshot: Snapshot
    fisher: FisherState
    baseline_accuracy: float
    epochs: int
    steps: int
    target_accuracy: float | None = None


@dataclass
class ForgettingRun:
    baseline_acc_A: float
    trajectory: list[tuple]  # rows as in CSV_COLUMNS
    variant: str  # "with_wpl" | "without_wpl"
    steps_per_epoch: int
    changed_a_params: list[str] = field(default_factory=list)
    shared_layers: int = 0

    @property
    def d(self) -> float:
        return self.baseline_acc_A - self.trajectory[-1][1]

    @property
    def final_acc_B(self) -> float:
        return self.trajectory[-1][2]


def _val_loss(clf, store, data: Dataset) -> float:
    from .autodiff import forward

    b = clf.bindings(store, data.x_val, one_hot(data.y_val, data.num_classes))
    return float(forward(clf.graph, b, outputs=clf.task)[clf.task])


def train_model_a(plan: ExperimentPlan, data: Dataset | None = None) -> ModelAResult:
    data = data or load_dataset(plan)
    rng = _streams(plan.seed)
    store = ParameterStore()
    widths = (data.input_dim, *plan.hidden_a, data.num_classes)
    layers = a_layers(plan)
    for (w, _), fi, fo in zip(layers, widths[:-1], widths[1:]):
        add_dense(store, rng["init_a"], w[:-2], fi, fo)
    a_ids = [p for pair in layers for p in pair]
    store.register_model("A", a_ids)
    clf = mlp_classifier(layers, plan.activation)
    loss = wpl_loss(clf.graph, clf.task, a_ids, (), plan.wpl.lam, with_anchor=False)
    y_train = one_hot(data.y_train, data.num_classes)

    target = None
    if plan.convergence == "loose":
        ref = plan.reference_accuracy
        if ref is None:
            ref = train_model_a(replace(plan, convergence="strict", loose_fraction=None), data).baseline_accuracy
        target = plan.loose_fraction * ref

    best, stale, steps, epoch = np.inf, 0, 0, 0
    done = target is not None and clf.accuracy(store, data.x_val, data.y_val) >= target
    while not done:
        if epoch >= plan.max_epochs_a:
            if target is not None:
                raise LooseTargetUnreachable(f"accuracy target {target:.4f} not reached in {plan.max_epochs_a} epochs")
            log.warning("model A hit max_epochs_a=%d before the plateau rule fired", plan.max_epochs_a)
            break
        for idx in minibatches(rng["order_a"], len(data.x_train), plan.batch_size):
            _, grads = clf.loss_and_grads(store, data.x_train[idx], y_train[idx], node=loss.total)
            sgd_step(store, grads, plan.lr)
            steps += 1
            if target is not None and steps % plan.loose_eval_every == 0:
                if clf.accuracy(store, data.x_val, data.y_val) >= target:
                    done = True
                    break
        epoch += 1
        if target is None:
            vl = _val_loss(clf, store, data)
            if vl < best - plan.min_delta:
                best, stale = vl, 0
            else:
                stale += 1
                done = stale >= plan.patience

    baseline = clf.accuracy(store, data.x_val, data.y_val)
    snap = store.snapshot(a_ids, model_id="A", epoch=epoch)
    fisher = FisherState()
    s_ids = shared_ids(plan)
    if s_ids:
        n = min(plan.fisher_samples, len(data.x_val))
        xf, yf = data.x_val[:n], one_hot(data.y_val[:n], data.num_classes)
        F = empirical_fisher(
            lambda x, y: clf.loss_and_grads(store, x, y)[1], xf, yf, plan.fisher_batch_size, keys=s_ids
        )
        fisher.replace(F)
    fisher.set_anchor(snap)
    return ModelAResult(store, snap, fisher, baseline, epoch, steps, target)


def _copy_store(src: ParameterStore, ids) -> ParameterStore:
    out = ParameterStore()
    for pid in ids:
        out.add(pid, src[pid])
    return out


def train_model_b(plan: ExperimentPlan, a: ModelAResult, use_wpl: bool, data: Dataset | None = None,
                  on_step: Callable[[int, ParameterStore], None] | None = None) -> ForgettingRun:
    """Train B from A's weights; ``on_step(step, store)`` runs after every SGD update."""
    data = data or load_dataset(plan)
    rng = _streams(plan.seed)
    a_ids = list(a.snapshot.keys())
    store = _copy_store(a.store, a_ids)
    store.register_model("A", a_ids)
    widths = (data.input_dim, *plan.hidden_b, data.num_classes)
    layers = b_layers(plan)
    k = plan.shared_layers
    if k == len(plan.hidden_a) + 1 and plan.hidden_b[k - 1] != data.num_classes:
        raise ValueError(f"sharing all of A needs hidden_b[{k - 1}] == {data.num_classes} (A's output width)")
    for i, ((w, _), fi, fo) in enumerate(zip(layers, widths[:-1], widths[1:])):
        if i >= k:
            add_dense(store, rng["init_b"], w[:-2], fi, fo)
    b_ids = [p for pair in layers for p in pair]
    store.register_model("B", b_ids)
    theta_s = sorted(store.shared("A", "B"))
    theta_2 = [p for p in b_ids if p not in theta_s]

    clf_a = mlp_classifier(a_layers(plan), plan.activation)
    clf_b = mlp_classifier(layers, plan.activation)
    loss = wpl_loss(clf_b.graph, clf_b.task, theta_2, theta_s, plan.wpl.lam, with_anchor=use_wpl)
    y_train = one_hot(data.y_train, data.num_classes)

    steps_per_epoch = -(-len(data.x_train) // plan.batch_size)
    trajectory: list[tuple] = []
    step = 0

    def evaluate(bd: WplBreakdown, alpha: float):
        trajectory.append((
            step,
            clf_a.accuracy(store, data.x_val, data.y_val),
            clf_b.accuracy(store, data.x_val, data.y_val),
            bd.total, bd.task_loss, bd.l2_term, bd.anchor_term, alpha,
        ))

    cap = 1.0 / plan.lr if plan.clip_anchor_weight else None

    def feed():
        return loss.feed(a.fisher, alpha, store.values_for(theta_s), max_weight=cap)

    alpha = 0.0
    for epoch in range(plan.epochs_b):
        alpha = alpha_at(plan.wpl, epoch) if use_wpl else 0.0
        extra = feed() if use_wpl else None
        for idx in minibatches(rng["order_b"], len(data.x_train), plan.batch_size):
            vals, grads = clf_b.loss_and_grads(store, data.x_train[idx], y_train[idx], node=loss.total, extra=extra)
            bd = loss.breakdown(vals)
            if step % plan.record_every == 0:
                evaluate(bd, alpha)
            sgd_step(store, grads, plan.lr)
            step += 1
            if on_step is not None:
                on_step(step, store)
    # final row: losses on the full training set at the final weights
    extra = feed() if use_wpl else None
    vals, _ = clf_b.loss_and_grads(store, data.x_train, y_train, node=loss.total, extra=extra)
    evaluate(loss.breakdown(vals), alpha)

    changed = sorted(pid for pid in a_ids if not np.array_equal(store[pid], a.snapshot[pid]))
    return ForgettingRun(a.baseline_accuracy, trajectory, "with_wpl" if use_wpl else "without_wpl",
                         steps_per_epoch, changed, k)


def reduction_rate(run_plain: ForgettingRun, run_wpl: ForgettingRun) -> float | None:
    """``(d_plain - d_wpl) / d_plain``; ``None`` when the plain run shows no forgetting."""
    d_plain = run_plain.d
    if d_plain <= 0:
        return None
    return (d_plain - run_wpl.d) / d_plain


def two_model_experiment(plan: ExperimentPlan, data: Dataset | None = None):
    data = data or load_dataset(plan)
    a = train_model_a(plan, data)
    plain = train_model_b(plan, a, use_wpl=False, data=data)
    wpl = train_model_b(plan, a, use_wpl=True, data=data)
    return a, plain, wpl


def shared_proportion_sweep(plan: ExperimentPlan, counts: Sequence[int], data: Dataset | None = None) -> dict[int, ForgettingRun]:
    """One plain run of B per shared-layer count, all against the same trained A."""
    data = data or load_dataset(plan)
    for k in counts:
        replace(plan, shared_layers=k)  # validates
    a = train_model_a(replace(plan, shared_layers=0), data)
    return {k: train_model_b(replace(plan, shared_layers=k), a, use_wpl=False, data=data) for k in counts}
