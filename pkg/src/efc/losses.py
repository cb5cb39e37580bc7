"""Training objectives with exact gradients w.r.t. features and head weights.

Every term is a mean over its batch. Labels are head column indices. A class
subset restricts the softmax to a set of columns; excluded columns receive
exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, log_softmax


@dataclass
class LossBreakdown:
    ce_current: float
    ce_all: float
    efm_term: float
    total: float
    grad_current: np.ndarray  # d total / d features of the current batch
    grad_replay: np.ndarray | None  # d total / d features of the replayed current rows
    grad_head: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return {
            "ce_current": self.ce_current,
            "ce_all": self.ce_all,
            "efm_term": self.efm_term,
            "total": self.total,
        }


def _positions(labels: np.ndarray, subset: np.ndarray) -> np.ndarray:
    lookup = np.full(int(max(subset.max(), labels.max())) + 1, -1)
    lookup[subset] = np.arange(len(subset))
    pos = lookup[labels]
    if np.any(pos < 0):
        bad = sorted(set(labels[pos < 0].tolist()))
        raise ValueError(f"labels {bad} are outside the class subset")
    return pos


def ce_restricted(logits, labels, subset) -> tuple[float, np.ndarray]:
    """Cross-entropy with the softmax taken over ``subset`` columns only.

    Returns the batch-mean loss and its gradient w.r.t. the full logit matrix.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    subset = np.asarray(subset, dtype=np.int64)
    if len(subset) == 0:
        raise ValueError("class subset is empty")
    if logits.shape[0] != labels.shape[0]:
        raise DimensionError("logits and labels differ in batch size")
    pos = _positions(labels, subset)
    batch = logits.shape[0]
    logp = log_softmax(logits[:, subset])
    rows = np.arange(batch)
    loss = -logp[rows, pos].mean()
    g = np.exp(logp)
    g[rows, pos] -= 1.0
    grad = np.zeros_like(logits)
    grad[:, subset] = g / batch
    return float(loss), grad


def ce_on_features(feats, labels, weight, subset):
    loss, dlogits = ce_restricted(feats @ weight, labels, subset)
    return loss, dlogits @ weight.T, feats.T @ dlogits


def efm_loss(f_new, f_old, efm_matrix, lambda_efm: float, eta: float) -> tuple[float, np.ndarray]:
    """Mean of df^T (lambda_efm E + eta I) df with df = f_new - f_old.

    ``lambda_efm=0`` gives plain feature distillation weighted by ``eta``.
    """
    f_new = np.atleast_2d(np.asarray(f_new, dtype=np.float64))
    f_old = np.atleast_2d(np.asarray(f_old, dtype=np.float64))
    if f_new.shape != f_old.shape:
        raise DimensionError(f"feature batches differ: {f_new.shape} vs {f_old.shape}")
    n = f_new.shape[1]
    e = np.asarray(efm_matrix, dtype=np.float64)
    if e.shape != (n, n):
        raise DimensionError(f"EFM shape {e.shape} does not match feature dim {n}")
    metric = lambda_efm * e + eta * np.eye(n)
    diff = f_new - f_old
    weighted = diff @ metric
    loss = float(np.mean(np.sum(weighted * diff, axis=1)))
    grad = 2.0 * weighted / f_new.shape[0]
    return loss, grad


def sym_loss(feat_x, y_x, protos, y_protos, weight, all_classes, lambda_pr: float = 10.0) -> LossBreakdown:
    """CE on current data plus lambda_pr times CE on prototypes, both over all classes."""
    all_classes = np.asarray(all_classes)
    ce_cur, g_x, g_w = ce_on_features(feat_x, y_x, weight, all_classes)
    ce_pr = 0.0
    if protos is not None and len(protos) and lambda_pr != 0.0:
        ce_p, _, g_wp = ce_on_features(protos, y_protos, weight, all_classes)
        ce_pr = lambda_pr * ce_p
        g_w = g_w + lambda_pr * g_wp
    return LossBreakdown(ce_cur, ce_pr, 0.0, ce_cur + ce_pr, g_x, None, g_w)


def pr_ace_loss(
    feat_x, y_x, feat_hat, y_hat, protos, y_protos, weight, current_classes, all_classes
) -> LossBreakdown:
    """Asymmetric prototype replay loss.

    First term: current batch, softmax over the current task's columns.
    Second term: prototypes joined with a second current batch, softmax over
    every seen column. Prototypes are features already, so they only reach
    the head.
    """
    current_classes = np.asarray(current_classes)
    all_classes = np.asarray(all_classes)
    if len(all_classes) == len(current_classes):
        raise ValueError("PR-ACE needs classes from earlier tasks (t >= 2)")
    if protos is None or len(protos) == 0:
        raise ValueError("PR-ACE needs a non-empty prototype batch")
    ce_cur, g_x, g_w = ce_on_features(feat_x, y_x, weight, current_classes)
    feat_hat = np.zeros((0, weight.shape[0])) if feat_hat is None else np.atleast_2d(feat_hat)
    y_hat = np.zeros(0, dtype=np.int64) if y_hat is None else np.asarray(y_hat)
    mixed = np.concatenate([protos, feat_hat], axis=0)
    mixed_y = np.concatenate([np.asarray(y_protos), y_hat]).astype(np.int64)
    ce_mix, g_mixed, g_wm = ce_on_features(mixed, mixed_y, weight, all_classes)
    g_hat = g_mixed[len(protos):]
    return LossBreakdown(ce_cur, ce_mix, 0.0, ce_cur + ce_mix, g_x, g_hat, g_w + g_wm)


def efc_total(classification: LossBreakdown, efm: tuple[float, np.ndarray] | None) -> LossBreakdown:
    """Add the feature regularizer (on the current batch) to a classification loss."""
    if efm is None:
        return classification
    value, grad = efm
    return LossBreakdown(
        classification.ce_current,
        classification.ce_all,
        value,
        classification.ce_current + classification.ce_all + value,
        classification.grad_current + grad,
        classification.grad_replay,
        classification.grad_head,
    )
