"""Ground-truth posteriors: conjugate Bayesian linear regression and grid quadrature."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .models import LabeledDataset, ModelSpec, log_likelihood, prepare
from .numkit import ConfigError, ShapeError, cholesky
from .priors import PriorSpec


@dataclass(frozen=True)
class BlrPosterior:
    mean: np.ndarray
    cov: np.ndarray
    noise_var: float
    prior_mean: np.ndarray
    prior_cov: np.ndarray

    @property
    def map(self) -> np.ndarray:
        # Gaussian posterior: mode == mean
        return self.mean

    @property
    def precision(self) -> np.ndarray:
        return _spd_inverse(self.cov)


def _spd_inverse(a: np.ndarray) -> np.ndarray:
    L = cholesky(a)
    linv = np.linalg.inv(L)
    out = linv.T @ linv
    return 0.5 * (out + out.T)


def blr_posterior(phi, y, prior_mean, prior_cov, noise_var: float) -> BlrPosterior:
    """Exact conjugate update for ``y = phi w + N(0, noise_var)``, ``w ~ N(mu0, S0)``."""
    if not noise_var > 0:
        raise ConfigError("noise variance must be > 0")
    mu0 = np.asarray(prior_mean, dtype=np.float64)
    s0 = np.asarray(prior_cov, dtype=np.float64)
    d = mu0.size
    phi = np.asarray(phi, dtype=np.float64).reshape(-1, d)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(phi) != len(y):
        raise ShapeError(f"{len(phi)} feature rows but {len(y)} targets")
    p0 = _spd_inverse(s0)
    prec = p0 + phi.T @ phi / noise_var
    cov = _spd_inverse(0.5 * (prec + prec.T))
    mean = cov @ (p0 @ mu0 + phi.T @ y / noise_var)
    return BlrPosterior(mean, cov, float(noise_var), mu0, s0)


def blr_predict(post: BlrPosterior, x_new):
    """Predictive mean ``mu^T x`` and variance ``x^T S x + noise_var`` per row."""
    x = np.atleast_2d(np.asarray(x_new, dtype=np.float64))
    if x.shape[1] != post.mean.size:
        raise ShapeError(f"expected {post.mean.size} features, got {x.shape[1]}")
    mean = x @ post.mean
    var = np.einsum("ij,jk,ik->i", x, post.cov, x) + post.noise_var
    return mean, var


@dataclass
class GridPosterior:
    axes: list
    log_density: np.ndarray
    density: np.ndarray
    log_normalizer: float
    basis: np.ndarray

    def marginal(self, axis: int) -> np.ndarray:
        """Normalised marginal density along ``axis`` (trapezoid over the others)."""
        d = self.density
        for ax in reversed(range(d.ndim)):
            if ax != axis:
                d = np.trapezoid(d, self.axes[ax], axis=ax)
        return d


def _trapz_all(values, axes):
    out = values
    for ax in reversed(range(values.ndim)):
        out = np.trapezoid(out, axes[ax], axis=ax)
    return float(out)


def grid_posterior(spec: ModelSpec, prior: PriorSpec, data: LabeledDataset, grids, basis=None, temperature: float = 1.0) -> GridPosterior:
    """Brute-force posterior on a tensor grid for models with at most 3 parameters.

    ``grids`` lists one 1-D axis per coordinate ``u``; parameters are
    ``w = basis @ u`` (identity by default), which allows grids laid out along
    rotated directions.
    """
    d = spec.n_params
    if d > 3:
        raise ConfigError(f"grid oracle handles at most 3 parameters, model has {d}")
    axes = [np.asarray(g, dtype=np.float64) for g in grids]
    if len(axes) != d:
        raise ShapeError(f"need {d} grid axes, got {len(axes)}")
    if any(len(a) > 401 for a in axes):
        raise ConfigError("grid axes are limited to 401 nodes")
    basis = np.eye(d) if basis is None else np.asarray(basis, dtype=np.float64)
    if not np.allclose(basis.T @ basis, np.eye(d), atol=1e-10):
        raise ConfigError("grid basis must be orthonormal")
    reach = 6 * prior.std
    for a in axes:
        if a.min() > -reach or a.max() < reach:
            raise ConfigError(f"grid axis must cover +-6 prior std ({reach:.3g})")

    bound = prior.bind(spec.layout())
    prep = prepare(spec, data.inputs) if data is not None else None
    logp = np.empty([len(a) for a in axes])
    for idx in itertools.product(*[range(len(a)) for a in axes]):
        u = np.array([axes[k][i] for k, i in enumerate(idx)])
        w = basis @ u
        lp, _ = bound.logpdf_grad(w)
        if data is not None:
            lp += log_likelihood(spec, w, data, prep)
        logp[idx] = lp / temperature
    top = logp.max()
    unnorm = np.exp(logp - top)
    z = _trapz_all(unnorm, axes)
    return GridPosterior(axes, logp, unnorm / z, top + np.log(z), basis)


def prior_on_grid(prior_family, axis) -> np.ndarray:
    """Scalar prior density of an i.i.d. family, normalised by trapezoid on ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    lp = np.array([prior_family.logpdf_grad(np.array([v]))[0] for v in axis])
    dens = np.exp(lp - lp.max())
    return dens / np.trapezoid(dens, axis)
