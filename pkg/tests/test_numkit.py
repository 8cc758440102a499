import numpy as np
import pytest

from bnnshift.numkit import (
    NumericError, RngStream, ShapeError, cholesky, eigh_symmetric, sample_gaussian,
)


def _charpoly_roots(a, grid=20001, iters=200):
    """Eigenvalues of a symmetric 3x3 by bisection on its characteristic polynomial."""
    tr = np.trace(a)
    minors = a[0, 0] * a[1, 1] - a[0, 1] ** 2 + a[0, 0] * a[2, 2] - a[0, 2] ** 2 + a[1, 1] * a[2, 2] - a[1, 2] ** 2
    det = (a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
           - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
           + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]))

    def f(x):
        return x**3 - tr * x**2 + minors * x - det

    r = max(abs(a[i, i]) + sum(abs(a[i, j]) for j in range(3) if j != i) for i in range(3)) + 1.0
    xs = np.linspace(-r, r, grid)
    fs = f(xs)
    roots = []
    for i in np.nonzero(np.sign(fs[:-1]) != np.sign(fs[1:]))[0]:
        lo, hi = xs[i], xs[i + 1]
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if np.sign(f(mid)) == np.sign(f(lo)):
                lo = mid
            else:
                hi = mid
        roots.append(0.5 * (lo + hi))
    return np.sort(roots)[::-1]


def test_eigh_identity():
    w, v = eigh_symmetric(np.eye(3))
    np.testing.assert_array_equal(w, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(v.T @ v, np.eye(3), atol=1e-12)


def test_eigh_diagonal():
    w, v = eigh_symmetric(np.diag([1.0, 2.0]))
    np.testing.assert_array_equal(w, [2.0, 1.0])
    np.testing.assert_allclose(np.abs(v), [[0, 1], [1, 0]], atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_eigh_matches_charpoly_bisection(seed):
    b = np.random.default_rng(seed).standard_normal((3, 3))
    a = b + b.T
    w, _ = eigh_symmetric(a)
    roots = _charpoly_roots(a)
    assert roots.size == 3
    np.testing.assert_allclose(w, roots, atol=1e-8)


@pytest.mark.parametrize("d", [2, 7, 20, 64])
def test_eigh_reconstruction_and_orthonormality(d):
    b = np.random.default_rng(d).standard_normal((d, d))
    a = b + b.T
    w, v = eigh_symmetric(a)
    assert np.all(np.diff(w) <= 0)
    assert np.linalg.norm(v @ np.diag(w) @ v.T - a) / np.linalg.norm(a) < 1e-8
    np.testing.assert_allclose(v.T @ v, np.eye(d), atol=1e-8)
    np.testing.assert_allclose(a @ v, v * w, atol=1e-8 * np.abs(w).max())


def test_eigh_rank_deficient():
    x = np.random.default_rng(0).standard_normal((40, 5))
    x[:, 4] = x[:, :4] @ [1.0, -2.0, 0.5, 0.0]
    w, v = eigh_symmetric(x.T @ x)
    c = np.array([1.0, -2.0, 0.5, 0.0, -1.0]) / np.sqrt(6.25)
    assert abs(w[-1]) < 1e-10 * w[0]
    assert abs(v[:, -1] @ c) > 1 - 1e-10


def test_eigh_errors():
    with pytest.raises(ShapeError):
        eigh_symmetric(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        eigh_symmetric([[1.0, 2.0], [0.0, 1.0]])
    b = np.random.default_rng(1).standard_normal((6, 6))
    with pytest.raises(NumericError):
        eigh_symmetric(b + b.T, max_sweeps=1)


def test_cholesky_cases():
    np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(cholesky([[4.0, 2.0], [2.0, 5.0]]), [[2.0, 0.0], [1.0, 2.0]], atol=1e-15)
    with pytest.raises(NumericError, match="pivot 1"):
        cholesky([[1.0, 1.0], [1.0, 1.0]])


@pytest.mark.parametrize("d", [1, 5, 30])
def test_cholesky_round_trip(d):
    b = np.random.default_rng(d).standard_normal((d, d))
    a = b @ b.T + d * np.eye(d)
    L = cholesky(a)
    assert np.allclose(L, np.tril(L))
    assert np.linalg.norm(L @ L.T - a) / np.linalg.norm(a) < 1e-10


def test_sample_gaussian():
    mean = np.array([1.5, -2.0])
    assert np.array_equal(sample_gaussian(RngStream(3), mean, np.zeros((2, 2))), mean)
    gen = RngStream(11).generator()
    draws = np.array([sample_gaussian(gen, np.zeros(2), np.eye(2)) for _ in range(100_000)])
    assert np.all(np.abs(draws.mean(axis=0)) < 0.02)
    a = sample_gaussian(RngStream(5, 2), mean, np.eye(2))
    b = sample_gaussian(RngStream(5, 2), mean, np.eye(2))
    assert np.array_equal(a, b)
    with pytest.raises(ShapeError):
        sample_gaussian(RngStream(0), np.zeros(3), np.eye(2))


def test_rng_streams():
    a = RngStream(7, 3).generator().standard_normal(10_000)
    b = RngStream(7, 3).generator().standard_normal(10_000)
    assert np.array_equal(a, b)
    c = RngStream(7, 4).generator().standard_normal(10_000)
    assert not np.array_equal(a, c)
    s = RngStream(7, 3)
    assert s.split(0) != s.split(1)
    assert s.split(2) == RngStream(7, 3).split(2)
    with pytest.raises(ValueError):
        RngStream(-1)
    RngStream(2**64 - 1, 2**64 - 1).generator().random()
