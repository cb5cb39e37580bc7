"""Local and empirical feature matrices, spectra and perturbation experiments.

For a feature vector f and head W (n x m) with p = softmax(W^T f), the local
feature matrix is

    E_f = sum_y p(y) g_y g_y^T,   g_y = W (e_y - p) = d log p(y) / d f,

i.e. the expected outer product of log-likelihood gradients w.r.t. the
feature vector. Because sum_y p(y) g_y = 0 its rank is at most m - 1, and any
direction d with W^T d proportional to the all-ones vector leaves the softmax
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import ClassifierHead, IncrementalModel
from .numerics import DimensionError, SeededRng, SymmetricEigen, log_softmax, softmax, sym_eigendecompose

RANK_THRESHOLD = 1e-10
CHUNK = 256


class DegenerateSpectrumError(ValueError):
    pass


def _weight(head) -> np.ndarray:
    return head.weight if isinstance(head, ClassifierHead) else np.asarray(head, dtype=np.float64)


@dataclass
class LocalFeatureMatrix:
    matrix: np.ndarray
    feature: np.ndarray
    num_classes: int


@dataclass
class EmpiricalFeatureMatrix:
    matrix: np.ndarray
    task: int
    sample_count: int
    _eigen: SymmetricEigen | None = field(default=None, repr=False)

    @property
    def eigen(self) -> SymmetricEigen:
        if self._eigen is None:
            self._eigen = sym_eigendecompose(self.matrix)
        return self._eigen

    @property
    def rank(self) -> int:
        return positive_count(self.eigen.eigenvalues)


def positive_count(eigenvalues: np.ndarray, threshold: float = RANK_THRESHOLD) -> int:
    """Number of eigenvalues counted as strictly positive (> threshold * max)."""
    top = float(np.max(eigenvalues)) if len(eigenvalues) else 0.0
    if top <= 0.0:
        return 0
    return int(np.sum(eigenvalues > threshold * top))


def _sum_local(feats: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Sum over rows of the local matrices, without the 1/N."""
    p = softmax(feats @ w)  # (N, m)
    centered = w[None, :, :] - (p @ w.T)[:, :, None]  # (N, n, m): columns g_y
    scaled = centered * np.sqrt(p)[:, None, :]
    flat = scaled.transpose(1, 0, 2).reshape(w.shape[0], -1)
    return flat @ flat.T


def local_efm(f, head) -> LocalFeatureMatrix:
    w = _weight(head)
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1 or f.shape[0] != w.shape[0]:
        raise DimensionError(f"feature of shape {f.shape} does not match head with n={w.shape[0]}")
    mat = _sum_local(f[None, :], w)
    return LocalFeatureMatrix(0.5 * (mat + mat.T), f, w.shape[1])


def efm_from_features(features, head, task: int = 0) -> EmpiricalFeatureMatrix:
    """Average the local matrices of a batch of features.

    Accumulation runs over fixed-size chunks in dataset order, so the result
    does not depend on anything but the data and the head.
    """
    w = _weight(head)
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if feats.shape[0] == 0:
        raise ValueError("cannot build an EFM from an empty dataset")
    if feats.shape[1] != w.shape[0]:
        raise DimensionError("feature dimension does not match the head")
    total = np.zeros((w.shape[0], w.shape[0]))
    for start in range(0, feats.shape[0], CHUNK):
        total += _sum_local(feats[start:start + CHUNK], w)
    mat = total / feats.shape[0]
    return EmpiricalFeatureMatrix(0.5 * (mat + mat.T), task, feats.shape[0])


def empirical_efm(samples, model: IncrementalModel, head=None, task: int = 0) -> EmpiricalFeatureMatrix:
    feats = model.features(np.atleast_2d(samples))
    return efm_from_features(feats, model.head if head is None else head, task)


def kl_divergence_logits(logits_p, logits_q) -> np.ndarray:
    """KL(softmax(logits_p) || softmax(logits_q)) along the last axis."""
    lp = log_softmax(logits_p)
    lq = log_softmax(logits_q)
    return np.sum(np.exp(lp) * (lp - lq), axis=-1)


def kl_quadratic_check(f, delta, head) -> tuple[float, float]:
    """Return (KL(p(.|f + delta) || p(.|f)), delta^T E_f delta)."""
    w = _weight(head)
    f = np.asarray(f, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != f.shape:
        raise DimensionError("perturbation and feature differ in shape")
    kl = float(kl_divergence_logits((f + delta) @ w, f @ w))
    quad = float(delta @ local_efm(f, w).matrix @ delta)
    return kl, quad


def perturb_features(features, efm: EmpiricalFeatureMatrix, mode: str, noise_std: float, rng: SeededRng) -> np.ndarray:
    """Add Gaussian noise along the principal or the non-principal eigenvectors.

    ``k`` is the number of strictly positive eigenvalues. Principal mode fills
    the first k noise coordinates, non-principal mode the remaining n - k.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    eig = efm.eigen
    n = eig.eigenvalues.shape[0]
    k = positive_count(eig.eigenvalues)
    if mode == "principal":
        if k == 0:
            raise DegenerateSpectrumError("EFM has no positive eigenvalues to perturb along")
        dims = slice(0, k)
    elif mode == "non-principal":
        dims = slice(k, n)
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    eps = np.zeros_like(feats)
    width = dims.stop - dims.start
    if width and noise_std:
        eps[:, dims] = rng.normal((feats.shape[0], width)) * noise_std
    out = feats + eps @ eig.eigenvectors.T
    return out[0] if np.ndim(features) == 1 else out


def spectral_elbow(eigenvalues, min_gap_decades: float = 2.0) -> int:
    """Count of eigenvalues before the largest relative drop in the spectrum.

    Returns 0 for a zero spectrum and n when no drop exceeds ``min_gap_decades``.
    """
    mu = np.sort(np.asarray(eigenvalues, dtype=np.float64))[::-1]
    top = mu[0] if len(mu) else 0.0
    if top <= 0.0:
        return 0
    logs = np.log10(np.maximum(mu, top * 1e-30))
    if len(mu) == 1:
        return 1
    gaps = logs[:-1] - logs[1:]
    i = int(np.argmax(gaps))
    if gaps[i] < min_gap_decades:
        return len(mu)
    return i + 1


def spectrum_report(efm, lambda_efm: float = 10.0, eta: float = 0.1) -> dict:
    """Sorted spectrum plus how many eigenvalues satisfy lambda_efm * mu > eta."""
    if isinstance(efm, EmpiricalFeatureMatrix):
        mu = efm.eigen.eigenvalues
        task = efm.task
    else:
        mu = sym_eigendecompose(efm).eigenvalues
        task = None
    return {
        "task": task,
        "eigenvalues": [float(v) for v in mu],
        "rank": positive_count(mu),
        "elbow": spectral_elbow(mu),
        "lambda_efm": lambda_efm,
        "eta": eta,
        "constraint_count": int(np.sum(lambda_efm * mu > eta)),
    }


@dataclass
class PerturbationReport:
    mode: str
    noise_std: float
    k: int
    accuracy_before: list[float]
    accuracy_after: list[float]
    prob_change: list[list[float]]  # per task, per class column: mean |delta p|
    max_prob_change: float

    @property
    def accuracy_drop(self) -> list[float]:
        return [b - a for b, a in zip(self.accuracy_before, self.accuracy_after)]

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "noise_std": self.noise_std,
            "k": self.k,
            "accuracy_before": self.accuracy_before,
            "accuracy_after": self.accuracy_after,
            "accuracy_drop": self.accuracy_drop,
            "prob_change": self.prob_change,
            "max_prob_change": self.max_prob_change,
        }


def feature_rms(features) -> float:
    """Root mean square feature-vector norm, sqrt(mean ||f||^2)."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return float(np.sqrt(np.mean(np.sum(np.square(feats), axis=1))))


def perturbation_experiment(
    model: IncrementalModel,
    efm: EmpiricalFeatureMatrix,
    eval_sets: list[tuple[np.ndarray, np.ndarray]],
    mode: str,
    noise_std: float,
    rng: SeededRng,
) -> PerturbationReport:
    """Accuracy and probability shifts when eval features are perturbed.

    ``eval_sets`` holds (inputs, head columns) per task.
    """
    w = model.head.weight
    before, after, changes = [], [], []
    max_change = 0.0
    for x, cols in eval_sets:
        feats = model.features(x)
        p0 = softmax(feats @ w)
        p1 = softmax(perturb_features(feats, efm, mode, noise_std, rng) @ w)
        before.append(float(np.mean(np.argmax(p0, axis=1) == cols)))
        after.append(float(np.mean(np.argmax(p1, axis=1) == cols)))
        diff = np.abs(p1 - p0)
        changes.append([float(v) for v in diff.mean(axis=0)])
        max_change = max(max_change, float(diff.max()))
    k = positive_count(efm.eigen.eigenvalues)
    return PerturbationReport(mode, float(noise_std), k, before, after, changes, max_change)
