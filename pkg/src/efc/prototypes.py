"""Exemplar-free class memory: Gaussian prototypes and their drift compensation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng, psd_factor, sym_eigendecompose

DEFAULT_SIGMA = 0.2
WEIGHT_FLOOR = 1e-8
DEGENERATE_DISTANCE = 1e-12

FULL = "full"
LOWRANK = "lowrank"
PER_TASK = "per-task"
LAST_TASK = "last-task"


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class CovariancePolicy:
    kind: str = FULL
    preserved_variance: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in (FULL, LOWRANK, PER_TASK, LAST_TASK):
            raise ValueError(f"unknown covariance policy {self.kind!r}")
        if not 0.0 < self.preserved_variance <= 1.0:
            raise ValueError("preserved_variance must be in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "CovariancePolicy":
        """Parse ``full``, ``lowrank:<fraction>``, ``per-task`` or ``last-task``."""
        if text.startswith(LOWRANK):
            _, _, frac = text.partition(":")
            return cls(LOWRANK, float(frac) if frac else 0.99)
        return cls(text)

    def __str__(self) -> str:
        if self.kind == LOWRANK:
            return f"{LOWRANK}:{self.preserved_variance:g}"
        return self.kind


@dataclass
class LowRankCovariance:
    vectors: np.ndarray  # (n, r)
    values: np.ndarray  # (r,)

    @property
    def rank(self) -> int:
        return self.values.shape[0]

    def dense(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T

    def factor(self) -> np.ndarray:
        return self.vectors * np.sqrt(self.values)


def compress_covariance(cov, preserved_variance: float) -> LowRankCovariance:
    """Keep the fewest top eigenpairs whose eigenvalues reach the variance fraction."""
    eig = sym_eigendecompose(cov)
    values = np.clip(eig.eigenvalues, 0.0, None)
    total = values.sum()
    if total <= 0.0:
        r = 0
    else:
        cumulative = np.cumsum(values)
        r = int(np.searchsorted(cumulative, preserved_variance * total * (1 - 1e-12)) + 1)
        r = min(r, len(values))
    return LowRankCovariance(eig.eigenvectors[:, :r].copy(), values[:r].copy())


@dataclass
class ClassStats:
    class_id: int
    mean: np.ndarray
    cov: np.ndarray
    count: int


def compute_class_stats(features, labels) -> list[ClassStats]:
    """Per-class mean and unbiased covariance, classes in ascending id order."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    out = []
    for c in np.unique(labels):
        rows = features[labels == c]
        if rows.shape[0] < 2:
            raise InsufficientDataError(f"class {int(c)} has {rows.shape[0]} sample(s); need at least 2")
        out.append(ClassStats(int(c), rows.mean(axis=0), np.cov(rows, rowvar=False).reshape(rows.shape[1], -1), rows.shape[0]))
    return out


@dataclass
class Prototype:
    class_id: int
    task: int
    mean: np.ndarray
    cov: np.ndarray | None = None
    lowrank: LowRankCovariance | None = None


@dataclass
class DriftUpdateReport:
    weight_mass: dict[int, float] = field(default_factory=dict)
    shift: dict[int, np.ndarray] = field(default_factory=dict)
    skipped: dict[int, bool] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            str(c): {
                "weight_mass": self.weight_mass[c],
                "shift_norm": float(np.linalg.norm(self.shift[c])),
                "skipped": self.skipped[c],
            }
            for c in self.weight_mass
        }


@dataclass
class PrototypeStore:
    policy: CovariancePolicy = field(default_factory=CovariancePolicy)
    prototypes: dict[int, Prototype] = field(default_factory=dict)
    task_covs: dict[int, np.ndarray] = field(default_factory=dict)
    _factors: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.prototypes)

    @property
    def classes(self) -> list[int]:
        return list(self.prototypes)

    def add_task_stats(self, stats: list[ClassStats], task: int) -> None:
        """Add a finished task's classes, reducing covariances per the policy."""
        ids = [s.class_id for s in stats]
        dup = [c for c in ids if c in self.prototypes]
        if dup or len(set(ids)) != len(ids):
            raise ValueError(f"duplicate class ids {dup or ids}")
        kind = self.policy.kind
        for s in stats:
            proto = Prototype(s.class_id, task, s.mean.copy())
            if kind == FULL:
                proto.cov = s.cov.copy()
            elif kind == LOWRANK:
                proto.lowrank = compress_covariance(s.cov, self.policy.preserved_variance)
            self.prototypes[s.class_id] = proto
        if kind in (PER_TASK, LAST_TASK) and stats:
            # pooled within-class covariance of the task
            pooled = np.mean([s.cov for s in stats], axis=0)
            if kind == LAST_TASK:
                self.task_covs.clear()
            self.task_covs[task] = pooled
        self._factors.clear()

    def covariance(self, class_id: int) -> np.ndarray:
        proto = self.prototypes[class_id]
        kind = self.policy.kind
        if kind == FULL:
            return proto.cov
        if kind == LOWRANK:
            return proto.lowrank.dense()
        if kind == PER_TASK:
            return self.task_covs[proto.task]
        return next(iter(self.task_covs.values()))

    def factor(self, class_id: int) -> np.ndarray:
        key = class_id
        if self.policy.kind == PER_TASK:
            key = ("task", self.prototypes[class_id].task)
        elif self.policy.kind == LAST_TASK:
            key = "last"
        if key not in self._factors:
            proto = self.prototypes[class_id]
            if self.policy.kind == LOWRANK:
                self._factors[key] = proto.lowrank.factor()
            else:
                self._factors[key] = psd_factor(self.covariance(class_id))
        return self._factors[key]

    def mean_matrix(self) -> np.ndarray:
        return np.stack([p.mean for p in self.prototypes.values()])


def sample_for_labels(store: PrototypeStore, labels, rng: SeededRng) -> np.ndarray:
    """One Gaussian prototype per requested label, rows aligned with ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = next(iter(store.prototypes.values())).mean.shape[0] if store.prototypes else 0
    # one draw for the whole batch; low-rank factors use the leading columns
    z = rng.normal((labels.shape[0], n))
    out = np.empty((labels.shape[0], n))
    for c in np.unique(labels):
        if int(c) not in store.prototypes:
            raise KeyError(f"class {int(c)} has no stored prototype")
        rows = labels == c
        factor = store.factor(int(c))
        out[rows] = store.prototypes[int(c)].mean + z[rows, : factor.shape[1]] @ factor.T
    return out


def sample_prototypes(store: PrototypeStore, classes, count: int, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` prototypes with labels uniform over ``classes``."""
    classes = np.asarray(classes, dtype=np.int64)
    missing = [int(c) for c in classes if int(c) not in store.prototypes]
    if missing:
        raise KeyError(f"classes {missing} have no stored prototype")
    labels = classes[rng.integers(0, len(classes), size=count)]
    return sample_for_labels(store, labels, rng), labels


def drift_compensate(
    store: PrototypeStore,
    old_features,
    new_features,
    efm_prev,
    sigma: float = DEFAULT_SIGMA,
    floor: float = WEIGHT_FLOOR,
) -> DriftUpdateReport:
    """Shift every stored mean by a kernel-weighted average of observed feature drift.

    Weights come from the previous task's EFM distance between old-model
    features and the prototype, max-normalized to [0, 1] per class, through
    a Gaussian kernel of width ``sigma``. Updates ``store`` in place.
    """
    old = np.asarray(old_features, dtype=np.float64)
    new = np.asarray(new_features, dtype=np.float64)
    if old.shape != new.shape:
        raise ValueError(f"old/new features are misaligned: {old.shape} vs {new.shape}")
    e = getattr(efm_prev, "matrix", efm_prev)
    drift = new - old
    report = DriftUpdateReport()
    for c, proto in store.prototypes.items():
        diff = old - proto.mean
        dist = np.sum((diff @ e) * diff, axis=1)
        top = dist.max()
        scaled = dist / top if top >= DEGENERATE_DISTANCE else np.zeros_like(dist)
        w = np.exp(-scaled / (2.0 * sigma**2))
        mass = float(w.sum())
        report.weight_mass[c] = mass
        if mass < floor:
            report.shift[c] = np.zeros_like(proto.mean)
            report.skipped[c] = True
            continue
        # centred on the first sample's drift so a constant drift passes through exactly
        shift = drift[0] + (w @ (drift - drift[0])) / mass
        proto.mean = proto.mean + shift
        report.shift[c] = shift
        report.skipped[c] = False
    return report
