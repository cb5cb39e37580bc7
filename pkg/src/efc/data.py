"""Synthetic Gaussian-blob benchmark, CSV ingestion and task splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import SeededRng


class SchemaError(ValueError):
    pass


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class LabeledDataset:
    x: np.ndarray  # (count, input_dim)
    y: np.ndarray  # class ids
    split: str = "train"
    stats: NormalizationStats | None = None

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, mask) -> "LabeledDataset":
        return LabeledDataset(self.x[mask], self.y[mask], self.split, self.stats)


@dataclass
class SyntheticBlobSpec:
    num_classes: int = 20
    input_dim: int = 32
    mean_scale: float = 1.0
    std: float = 1.0
    train_per_class: int = 250
    eval_per_class: int = 50
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_classes", "input_dim", "train_per_class", "eval_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.std < 0 or self.mean_scale <= 0:
            raise ValueError("std must be >= 0 and mean_scale > 0")


def generate_blobs(spec: SyntheticBlobSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Class c draws from N(mu_c, std^2 I); mu_c ~ N(0, mean_scale^2 I)."""
    spec.validate()
    rng_means = SeededRng(spec.seed, "blobs/means")
    means = rng_means.normal((spec.num_classes, spec.input_dim)) * spec.mean_scale
    if len({m.tobytes() for m in means}) != spec.num_classes:
        raise ValueError("class means are not pairwise distinct")

    def draw(per_class: int, label: str) -> LabeledDataset:
        rng = SeededRng(spec.seed, label)
        y = np.repeat(np.arange(spec.num_classes), per_class)
        x = means[y] + rng.normal((y.shape[0], spec.input_dim)) * spec.std
        return LabeledDataset(x, y, label.rsplit("/", 1)[-1])

    return draw(spec.train_per_class, "blobs/train"), draw(spec.eval_per_class, "blobs/eval")


def fit_normalization(train: LabeledDataset) -> NormalizationStats:
    std = train.x.std(axis=0)
    return NormalizationStats(train.x.mean(axis=0), np.where(std > 0, std, 1.0))


def normalize(dataset: LabeledDataset, stats: NormalizationStats) -> LabeledDataset:
    return LabeledDataset(stats.apply(dataset.x), dataset.y.copy(), dataset.split, stats)


@dataclass
class CsvSchema:
    input_dim: int
    num_classes: int
    has_header: bool = False


def load_csv(path, schema: CsvSchema, split: str = "train") -> LabeledDataset:
    """Rows are ``f_1, ..., f_d, label``; labels must lie in [0, num_classes)."""
    xs, ys = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and schema.has_header:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != schema.input_dim + 1:
                raise SchemaError(f"{path}:{lineno}: expected {schema.input_dim + 1} fields, got {len(row)}")
            try:
                feats = [float(v) for v in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= label < schema.num_classes:
                raise SchemaError(f"{path}:{lineno}: label {label} outside [0, {schema.num_classes})")
            xs.append(feats)
            ys.append(label)
    x = np.array(xs, dtype=np.float64).reshape(len(xs), schema.input_dim)
    if not np.all(np.isfinite(x)):
        raise SchemaError(f"{path}: non-finite feature values")
    return LabeledDataset(x, np.array(ys, dtype=np.int64), split)


def write_csv(dataset: LabeledDataset, path, header: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow([f"f{i}" for i in range(dataset.input_dim)] + ["label"])
        for row, label in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


@dataclass
class ScenarioPlan:
    mode: str
    num_classes: int
    steps: int
    tasks: list[list[int]]  # class ids per task, in head-column order
    warm_fraction: float = 0.5
    column_of: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        flat = [c for t in self.tasks for c in t]
        if self.steps < 1 or len(self.tasks) != self.steps:
            raise ValueError("plan needs one class list per step")
        if sorted(flat) != list(range(self.num_classes)):
            raise ValueError("task class lists must partition the class universe")
        self.column_of = np.empty(self.num_classes, dtype=np.int64)
        self.column_of[flat] = np.arange(len(flat))

    @property
    def class_counts(self) -> list[int]:
        return [len(t) for t in self.tasks]


def _spread(total: int, parts: int) -> list[int]:
    # remainder goes to the earliest parts
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def task_sizes(num_classes: int, steps: int, mode: str, warm_fraction: float = 0.5) -> list[int]:
    if steps < 1 or steps > num_classes:
        raise ValueError("need 1 <= steps <= num_classes")
    if mode == "cold" or steps == 1:
        return _spread(num_classes, steps)
    if mode != "warm":
        raise ValueError(f"unknown scenario mode {mode!r}")
    first = int(round(num_classes * warm_fraction))
    first = min(max(first, 1), num_classes - (steps - 1))
    return [first] + _spread(num_classes - first, steps - 1)


def make_plan(num_classes: int, steps: int, mode: str, seed: int, warm_fraction: float = 0.5) -> ScenarioPlan:
    """Shuffle classes with the experiment seed and cut them into tasks."""
    order = SeededRng(seed, "class-order").permutation(num_classes).tolist()
    tasks, start = [], 0
    for size in task_sizes(num_classes, steps, mode, warm_fraction):
        tasks.append(order[start:start + size])
        start += size
    return ScenarioPlan(mode, num_classes, steps, tasks, warm_fraction)


def split_tasks(dataset: LabeledDataset, plan: ScenarioPlan) -> list[LabeledDataset]:
    if dataset.y.size and (dataset.y.min() < 0 or dataset.y.max() >= plan.num_classes):
        raise SchemaError("dataset labels fall outside the plan's class universe")
    return [dataset.subset(np.isin(dataset.y, classes)) for classes in plan.tasks]
