"""Dense linear algebra, spectral decomposition and seeded sampling.

Everything here works in float64. Symmetric eigendecompositions are returned
sorted by descending eigenvalue with a fixed eigenvector sign convention so
that downstream results do not depend on LAPACK's arbitrary sign choices.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

EIG_CLAMP = 1e-10
PSD_TOLERANCE = 1e-8
SYMMETRY_TOLERANCE = 1e-10


class DimensionError(ValueError):
    pass


class SymmetryError(ValueError):
    pass


class NotPSDError(ValueError):
    pass


@dataclass(frozen=True)
class SymmetricEigen:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns match eigenvalue order

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


def check_finite(a: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")


def _as_symmetric(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise DimensionError(f"expected a non-empty square matrix, got shape {a.shape}")
    check_finite(a, "matrix")
    asym = np.max(np.abs(a - a.T))
    if asym > SYMMETRY_TOLERANCE:
        raise SymmetryError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    return 0.5 * (a + a.T)


def _finish(values: np.ndarray, vectors: np.ndarray) -> SymmetricEigen:
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = vectors[:, order]
    # small negative eigenvalues are estimation noise
    values = np.where((values < 0) & (values > -EIG_CLAMP), 0.0, values)
    # sign convention: largest-magnitude component of each eigenvector is positive
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    vectors = vectors * signs
    values.setflags(write=False)
    vectors.setflags(write=False)
    return SymmetricEigen(values, vectors)


def jacobi_eigh(m, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigenvalue iteration for a symmetric matrix.

    Returns unsorted (eigenvalues, eigenvectors). Kept as an independent
    second route for checking the LAPACK-backed path.
    """
    a = np.array(m, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a**2) - np.sum(np.diag(a) ** 2))
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    return np.diag(a).copy(), v


def sym_eigendecompose(m, method: str = "lapack") -> SymmetricEigen:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Negative eigenvalues with magnitude below ``EIG_CLAMP`` are set to zero.
    ``method="jacobi"`` uses the in-house cyclic Jacobi solver instead of LAPACK.
    """
    a = _as_symmetric(m)
    if method == "lapack":
        values, vectors = np.linalg.eigh(a)
    elif method == "jacobi":
        values, vectors = jacobi_eigh(a)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    return _finish(values, vectors)


def psd_factor(cov) -> np.ndarray:
    """Return L with L @ L.T == cov, built as U diag(sqrt(lambda))."""
    eig = sym_eigendecompose(cov)
    if eig.eigenvalues[-1] < -PSD_TOLERANCE:
        raise NotPSDError(f"covariance has eigenvalue {eig.eigenvalues[-1]:.3e}")
    return eig.eigenvectors * np.sqrt(np.clip(eig.eigenvalues, 0.0, None))


@dataclass
class SeededRng:
    """A labelled random stream: same (seed, label, call sequence) gives same draws."""

    seed: int
    label: str
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        digest = hashlib.sha256(self.label.encode("utf-8")).digest()
        label_key = int.from_bytes(digest[:8], "little")
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, label_key])
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, label: str) -> "SeededRng":
        return SeededRng(self.seed, f"{self.label}/{label}")

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)


def sample_with_factor(mean: np.ndarray, factor: np.ndarray, count: int, rng: SeededRng) -> np.ndarray:
    z = rng.normal((count, factor.shape[1]))
    return mean + z @ factor.T


def sample_multivariate_gaussian(mean, cov, count: int, rng: SeededRng) -> np.ndarray:
    """Draw ``count`` rows from N(mean, cov) via the eigen factor of cov."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
        raise DimensionError(f"mean {mean.shape} incompatible with covariance {cov.shape}")
    return sample_with_factor(mean, psd_factor(cov), count, rng)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    check_finite(z, "logits")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(z, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(z, axis=axis))
