"""Dense linear algebra and seeded random streams.

Matrices are plain 2-D float64 numpy arrays. The symmetric eigensolver is a
cyclic Jacobi sweep (O(d^3) per sweep); it is capped at ``MAX_EIGH_DIM``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_EIGH_DIM = 4096


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ConfigError(ValueError):
    pass


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix has non-finite entries")
    return a


def _check_symmetric(a: np.ndarray, tol: float) -> None:
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix is not square: {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > tol * scale:
        raise ShapeError("matrix is not symmetric within tolerance")


def eigh_symmetric(a, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigen-decompose a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors stored as orthonormal columns.
    """
    a = as_matrix(a)
    _check_symmetric(a, tol)
    d = a.shape[0]
    if d > MAX_EIGH_DIM:
        raise ShapeError(f"dimension {d} exceeds eigensolver cap {MAX_EIGH_DIM}")
    a = 0.5 * (a + a.T)
    v = np.eye(d)
    if d <= 1:
        return a.diagonal().copy(), v

    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(d), v
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(a.diagonal()))
        if off <= 1e-14 * norm:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                # entries at roundoff level relative to the whole matrix
                if abs(apq) <= 1e-17 * norm:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
    else:
        raise NumericError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")

    w = a.diagonal().copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def cholesky(a) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises :class:`NumericError` naming the first non-positive pivot.
    """
    a = as_matrix(a)
    _check_symmetric(a, 1e-10)
    d = a.shape[0]
    L = np.zeros_like(a)
    for j in range(d):
        pivot = a[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > 0.0:
            raise NumericError(f"matrix is not positive definite: pivot {j} is {pivot:.3g}")
        L[j, j] = np.sqrt(pivot)
        if j + 1 < d:
            L[j + 1 :, j] = (a[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Each call to :meth:`generator` restarts the stream from its first draw;
    keep the returned generator around to continue a sequence.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not 0 <= value < 2**64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value}")

    def generator(self) -> np.random.Generator:
        key = self.seed | (self.stream_id << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, index: int) -> "RngStream":
        """Child stream; children of distinct indices never share state."""
        mixed = np.random.SeedSequence([self.seed, self.stream_id, index]).generate_state(2, np.uint64)
        return RngStream(int(mixed[0]), int(mixed[1]))


def rng_of(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return RngStream(int(rng)).generator()


def sample_gaussian(rng, mean, cov_factor) -> np.ndarray:
    """One draw of ``mean + cov_factor @ z`` with ``z`` standard normal."""
    mean = np.asarray(mean, dtype=np.float64)
    cov_factor = np.asarray(cov_factor, dtype=np.float64)
    if mean.ndim != 1 or cov_factor.shape != (mean.size, mean.size):
        raise ShapeError(f"mean {mean.shape} and factor {cov_factor.shape} do not agree")
    z = rng_of(rng).standard_normal(mean.size)
    return mean + cov_factor @ z
