"""The incremental learning loop, evaluation and accuracy metrics."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .backbone import (
    AdamState,
    IncrementalModel,
    ModelSnapshot,
    adam_step,
    backward,
    empty_head,
    extend_head,
    forward_features,
    init_backbone,
)
from .config import ExperimentConfig
from .data import (
    CsvSchema,
    LabeledDataset,
    ScenarioPlan,
    SyntheticBlobSpec,
    fit_normalization,
    generate_blobs,
    load_csv,
    make_plan,
    normalize,
    split_tasks,
)
from .efm import EmpiricalFeatureMatrix, efm_from_features, feature_rms, perturbation_experiment, spectrum_report
from .numerics import SeededRng
from .prototypes import CovariancePolicy, PrototypeStore, compute_class_stats, drift_compensate, sample_for_labels

log = logging.getLogger(__name__)

# variant -> (regularizer, classification loss)
VARIANT_TABLE = {
    "EFC": ("efm", "pr-ace"),
    "EFM+sym": ("efm", "sym"),
    "FD+sym": ("fd", "sym"),
    "FD+PR-ACE": ("fd", "pr-ace"),
    "finetune": (None, "ce"),
}


class IncompleteTableError(ValueError):
    pass


@dataclass
class MetricsTable:
    """acc[i, k] is the accuracy on task i after training task k (0-based)."""

    class_counts: list[int]
    acc: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        k = len(self.class_counts)
        self.acc = np.full((k, k), np.nan)

    @property
    def steps(self) -> int:
        return len(self.class_counts)

    def record(self, after_task: int, accuracies: list[float]) -> None:
        if len(accuracies) != after_task + 1:
            raise ValueError("need one accuracy per seen task")
        for i, a in enumerate(accuracies):
            if not 0.0 <= a <= 1.0:
                raise ValueError("accuracies must lie in [0, 1]")
            self.acc[i, after_task] = a

    def completed(self) -> int:
        done = 0
        for k in range(self.steps):
            if np.all(np.isfinite(self.acc[: k + 1, k])):
                done = k + 1
            else:
                break
        return done

    def to_lists(self) -> list[list[float | None]]:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.acc]


def a_step(table: MetricsTable, k: int) -> float:
    """Class-count weighted accuracy over tasks 1..k after training task k (k 1-based)."""
    if k < 1 or table.completed() < k:
        raise IncompleteTableError(f"metrics table is not complete through task {k}")
    counts = np.asarray(table.class_counts[:k], dtype=np.float64)
    return float(np.sum(counts * table.acc[:k, k - 1]) / counts.sum())


def metrics(table: MetricsTable, k: int | None = None) -> tuple[float, float]:
    """Return (A_step^K, A_inc^K)."""
    k = table.steps if k is None else k
    steps = [a_step(table, i) for i in range(1, k + 1)]
    return steps[-1], float(np.mean(steps))


@dataclass
class TaskData:
    train: LabeledDataset
    eval: LabeledDataset
    train_cols: np.ndarray
    eval_cols: np.ndarray


@dataclass
class RunState:
    model: IncrementalModel
    store: PrototypeStore
    efms: list[EmpiricalFeatureMatrix] = field(default_factory=list)
    snapshot: ModelSnapshot | None = None
    task: int = 0  # number of finished tasks


@dataclass
class RunResult:
    config: ExperimentConfig
    plan: ScenarioPlan
    table: MetricsTable
    epoch_losses: list[list[dict]]
    spectra: list[dict]
    drift: list[dict]
    state: RunState
    checkpoints: list[RunState] = field(default_factory=list)

    def summary(self) -> dict:
        steps = [a_step(self.table, k) for k in range(1, self.table.steps + 1)]
        return {
            "A_step": steps[-1],
            "A_inc": float(np.mean(steps)),
            "A_step_per_task": steps,
        }

    def to_dict(self) -> dict:
        out = {
            "schema_version": 1,
            "config": self.config.to_dict(),
            "plan": {"mode": self.plan.mode, "tasks": self.plan.tasks},
            "metrics_table": self.table.to_lists(),
            "class_counts": self.table.class_counts,
            "epoch_losses": self.epoch_losses,
            "spectra": self.spectra,
            "drift": self.drift,
        }
        out.update(self.summary())
        return out


def load_data(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = config.data
    if d.source == "synthetic":
        spec = SyntheticBlobSpec(
            d.num_classes, d.input_dim, d.mean_scale, d.std, d.train_per_class, d.eval_per_class, d.seed
        )
        train, test = generate_blobs(spec)
    else:
        schema = CsvSchema(d.input_dim, d.num_classes, d.has_header)
        train = load_csv(d.train_path, schema, "train")
        test = load_csv(d.eval_path, schema, "eval")
    if d.normalize:
        stats = fit_normalization(train)
        train, test = normalize(train, stats), normalize(test, stats)
    return train, test


def prepare_tasks(config: ExperimentConfig, train: LabeledDataset, test: LabeledDataset):
    s = config.scenario
    plan = make_plan(config.data.num_classes, s.steps, s.mode, config.seed, s.warm_fraction)
    tasks = [
        TaskData(tr, ev, plan.column_of[tr.y], plan.column_of[ev.y])
        for tr, ev in zip(split_tasks(train, plan), split_tasks(test, plan))
    ]
    return plan, tasks


def evaluate(model: IncrementalModel, tasks: list[TaskData]) -> list[float]:
    """Task-agnostic accuracy: argmax over every head column seen so far."""
    out = []
    for td in tasks:
        pred = np.argmax(model.logits(td.eval.x), axis=1)
        out.append(float(np.mean(pred == td.eval_cols)))
    return out


def _batches(rng: SeededRng, n: int, size: int):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start:start + size]


def _mean_logs(logs: list[dict]) -> dict:
    return {k: float(np.mean([d[k] for d in logs])) for k in logs[0]} if logs else {}


def _rates(model: IncrementalModel, lr: float, lr_head: float | None):
    n_backbone = len(model.backbone.arrays())
    return [lr] * n_backbone + [lr if lr_head is None else lr_head]


def run_first_task(config: ExperimentConfig, task: TaskData, rng: SeededRng) -> tuple[RunState, list[dict]]:
    """Plain cross-entropy training on the first task's classes."""
    mc, tc = config.model, config.trainer
    sizes = [task.train.input_dim, *mc.hidden, mc.feature_dim]
    backbone = init_backbone(sizes, rng.child("init"))
    head = extend_head(empty_head(mc.feature_dim), len(np.unique(task.train_cols)), mc.head_init_scale, rng.child("head/1"))
    model = IncrementalModel(backbone, head)
    cols = head.columns(0)
    adam = AdamState()
    batch_rng = rng.child("batch/1")
    epoch_logs = []
    for epoch in range(tc.epochs_first):
        decay = 0.1 ** sum(epoch >= m for m in tc.lr_first_milestones)
        head_lr = tc.lr_first if tc.lr_first_head is None else tc.lr_first_head
        lr = _rates(model, tc.lr_first * decay, head_lr * decay)
        logs = []
        for idx in _batches(batch_rng, len(task.train), tc.batch_size):
            feats, cache = forward_features(task.train.x[idx], model.backbone, cache=True)
            loss, g_f, g_w = losses.ce_on_features(feats, task.train_cols[idx], model.head.weight, cols)
            grads = backward(model.backbone, cache, g_f)
            adam_step(model.parameters(), grads.arrays() + [g_w], adam, lr, tc.weight_decay)
            logs.append({"ce_current": loss, "ce_all": 0.0, "efm_term": 0.0, "total": loss})
        epoch_logs.append(_mean_logs(logs))

    store = PrototypeStore(CovariancePolicy.parse(tc.cov_policy))
    state = RunState(model, store)
    _finish_task(state, task, config)
    return state, epoch_logs


def _finish_task(state: RunState, task: TaskData, config: ExperimentConfig, feats=None) -> None:
    feats = state.model.features(task.train.x) if feats is None else feats
    state.store.add_task_stats(compute_class_stats(feats, task.train_cols), state.task)
    state.efms.append(efm_from_features(feats, state.model.head, state.task))
    state.snapshot = state.model.snapshot()
    state.task += 1


def run_incremental_task(state: RunState, task: TaskData, config: ExperimentConfig, rng: SeededRng) -> tuple[list[dict], dict]:
    """One incremental step: train with the selected loss, then update memory.

    After the optimization loop the stored prototypes are drift-compensated
    with the previous EFM, the new classes' statistics are added and the new
    EFM is computed.
    """
    if state.snapshot is None or not state.efms:
        raise RuntimeError("incremental task needs the previous snapshot and EFM")
    tc = config.trainer
    t = state.task  # 0-based index of this task
    regularizer, cls_loss = VARIANT_TABLE[tc.loss_variant]
    lam, eta = (tc.lambda_efm, tc.eta) if regularizer == "efm" else (0.0, tc.fd_eta)
    snapshot = state.snapshot
    checksum = snapshot.checksum()
    e_prev = state.efms[-1]

    model = state.model
    new_classes = len(np.unique(task.train_cols))
    model.head = extend_head(model.head, new_classes, config.model.head_init_scale, rng.child(f"head/{t + 1}"))
    current = model.head.columns(t)
    seen = model.head.columns()
    old = np.arange(current[0])
    x, y = task.train.x, task.train_cols
    # rows of x grouped by class, for vectorized same-class draws
    order = np.argsort(y, kind="stable")
    class_start = np.searchsorted(y[order], current)
    class_size = np.bincount(y, minlength=seen[-1] + 1)[current]
    old_feats = snapshot.features(x) if regularizer else None

    adam = AdamState()
    rates = _rates(model, tc.lr_incremental, tc.lr_head)
    batch_rng = rng.child(f"batch/{t + 1}")
    mix_rng = rng.child(f"mix/{t + 1}")
    proto_rng = rng.child(f"proto-sample/{t + 1}")
    epoch_logs = []
    for _ in range(tc.epochs_incremental):
        logs = []
        for idx in _batches(batch_rng, len(x), tc.batch_size):
            b = len(idx)
            hat_idx = np.zeros(0, dtype=np.int64)
            protos = proto_labels = None
            if cls_loss == "pr-ace":
                mix = seen[mix_rng.integers(0, len(seen), size=tc.batch_size)]
                if not np.any(mix < current[0]):
                    mix[0] = old[mix_rng.integers(0, len(old))]
                is_old = mix < current[0]
                proto_labels = mix[is_old]
                hat_labels = mix[~is_old]
                k = hat_labels - current[0]
                pick = np.floor(mix_rng.random(len(k)) * class_size[k]).astype(np.int64)
                hat_idx = order[class_start[k] + pick]
                protos = sample_for_labels(state.store, proto_labels, proto_rng)
            elif cls_loss == "sym":
                proto_labels = old[mix_rng.integers(0, len(old), size=tc.batch_size)]
                protos = sample_for_labels(state.store, proto_labels, proto_rng)

            inputs = x[np.concatenate([idx, hat_idx])]
            feats, cache = forward_features(inputs, model.backbone, cache=True)
            f_x, f_hat = feats[:b], feats[b:]
            w = model.head.weight
            if cls_loss == "pr-ace":
                parts = losses.pr_ace_loss(f_x, y[idx], f_hat, y[hat_idx], protos, proto_labels, w, current, seen)
            elif cls_loss == "sym":
                parts = losses.sym_loss(f_x, y[idx], protos, proto_labels, w, seen, tc.lambda_pr)
            else:
                parts = losses.sym_loss(f_x, y[idx], None, None, w, seen, 0.0)
            reg = losses.efm_loss(f_x, old_feats[idx], e_prev.matrix, lam, eta) if regularizer else None
            total = losses.efc_total(parts, reg)

            g_feats = total.grad_current
            if total.grad_replay is not None and len(hat_idx):
                g_feats = np.concatenate([g_feats, total.grad_replay], axis=0)
            grads = backward(model.backbone, cache, g_feats)
            adam_step(model.parameters(), grads.arrays() + [total.grad_head], adam, rates, tc.weight_decay)
            logs.append(total.as_dict())
        epoch_logs.append(_mean_logs(logs))

    if snapshot.checksum() != checksum:
        raise RuntimeError("previous-task snapshot was modified during training")

    new_feats = model.features(x)
    drift_summary = {}
    if tc.proto_update and cls_loss != "ce":
        before = old_feats if old_feats is not None else snapshot.features(x)
        report = drift_compensate(state.store, before, new_feats, e_prev, tc.sigma)
        drift_summary = report.summary()
    _finish_task(state, task, config, new_feats)
    return epoch_logs, drift_summary


def run_experiment(config: ExperimentConfig, data=None, keep_checkpoints: bool = False) -> RunResult:
    """Train every task of the scenario and evaluate after each one."""
    config.validate()
    train, test = load_data(config) if data is None else data
    plan, tasks = prepare_tasks(config, train, test)
    rng = SeededRng(config.seed, "run")
    table = MetricsTable(plan.class_counts)
    tc = config.trainer

    state, first_logs = run_first_task(config, tasks[0], rng)
    table.record(0, evaluate(state.model, tasks[:1]))
    epoch_losses = [first_logs]
    drift = [{}]
    checkpoints = [copy_state(state)] if keep_checkpoints else []
    log.info("task 1/%d: acc %.3f", plan.steps, table.acc[0, 0])

    for t in range(1, plan.steps):
        logs, summary = run_incremental_task(state, tasks[t], config, rng)
        epoch_losses.append(logs)
        drift.append(summary)
        table.record(t, evaluate(state.model, tasks[: t + 1]))
        if keep_checkpoints:
            checkpoints.append(copy_state(state))
        log.info("task %d/%d: A_step %.3f", t + 1, plan.steps, a_step(table, t + 1))

    spectra = [spectrum_report(e, tc.lambda_efm, tc.eta) for e in state.efms]
    return RunResult(config, plan, table, epoch_losses, spectra, drift, state, checkpoints)


def copy_state(state: RunState) -> RunState:
    model = IncrementalModel(copy.deepcopy(state.model.backbone), copy.deepcopy(state.model.head))
    store = copy.deepcopy(state.store)
    return RunState(model, store, list(state.efms), state.snapshot, state.task)


def default_noise_std(model: IncrementalModel, tasks: list[TaskData], scale: float = 0.5) -> float:
    """Half the RMS norm of the evaluation features, the default perturbation scale."""
    return scale * feature_rms(np.concatenate([model.features(td.eval.x) for td in tasks]))


def perturb_tasks(model, efm, tasks: list[TaskData], mode: str, noise_std: float | None, rng: SeededRng):
    """Run the perturbation experiment on the eval split of ``tasks``."""
    if noise_std is None:
        noise_std = default_noise_std(model, tasks)
    sets = [(td.eval.x, td.eval_cols) for td in tasks]
    return perturbation_experiment(model, efm, sets, mode, noise_std, rng)
