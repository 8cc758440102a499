"""Prior families over the flat parameter vector.

A :class:`PriorSpec` pairs a ``default`` family, applied i.i.d. to every
coordinate, with an optional ``first_layer`` family that replaces it on the
first layer (weights and, where the family says so, the bias). Families:

* :class:`Gaussian` ``N(0, variance)``
* :class:`Laplace` ``exp(-|w| / scale) / (2 scale)``
* :class:`StudentT` with ``df`` and squared scale ``variance``
* :class:`ExpNorm` ``exp(-|w|^p / (2 variance))`` per coordinate, unnormalised
* :class:`CovariancePrior` data-aligned Gaussian on first-layer columns
  (EmpCov and PCA-decay constructions)
* :class:`SumFilter` Gaussian plus a Laplace factor on each first-layer
  filter's weight sum
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import io
from .numkit import ConfigError, ShapeError, cholesky, eigh_symmetric, rng_of

LOG2PI = np.log(2 * np.pi)


# ---------------------------------------------------------------------------
# i.i.d. families


@dataclass(frozen=True)
class Gaussian:
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ConfigError("gaussian variance must be > 0")

    def logpdf_grad(self, w):
        lp = -0.5 * np.dot(w, w) / self.variance - 0.5 * w.size * (LOG2PI + np.log(self.variance))
        return lp, -w / self.variance

    def sample(self, gen, size):
        return np.sqrt(self.variance) * gen.standard_normal(size)

    @property
    def std(self):
        return np.sqrt(self.variance)


@dataclass(frozen=True)
class Laplace:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("laplace scale must be > 0")

    def logpdf_grad(self, w):
        lp = -np.abs(w).sum() / self.scale - w.size * np.log(2 * self.scale)
        return lp, -np.sign(w) / self.scale

    def sample(self, gen, size):
        return gen.laplace(0.0, self.scale, size)

    @property
    def std(self):
        return np.sqrt(2.0) * self.scale


@dataclass(frozen=True)
class StudentT:
    df: float
    variance: float

    def __post_init__(self):
        if not self.df > 0:
            raise ConfigError("student_t degrees of freedom must be > 0")
        if not self.variance > 0:
            raise ConfigError("student_t variance must be > 0")

    def logpdf_grad(self, w):
        nu, a2 = self.df, self.variance
        u = 1.0 + w * w / (nu * a2)
        norm = special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2) - 0.5 * np.log(nu * np.pi * a2)
        lp = w.size * norm - 0.5 * (nu + 1) * np.log(u).sum()
        return lp, -(nu + 1) * w / (nu * a2 * u)

    def sample(self, gen, size):
        return np.sqrt(self.variance) * gen.standard_t(self.df, size)

    @property
    def std(self):
        s = np.sqrt(self.variance)
        return s * np.sqrt(self.df / (self.df - 2)) if self.df > 2 else s


@dataclass(frozen=True)
class ExpNorm:
    """Generalised normal; the normalising constant is omitted."""

    p: float
    variance: float

    def __post_init__(self):
        if not self.p > 0:
            raise ConfigError("exp_norm power must be > 0")
        if not self.variance > 0:
            raise ConfigError("exp_norm variance must be > 0")

    def logpdf_grad(self, w):
        a = np.abs(w)
        lp = -(a**self.p).sum() / (2 * self.variance)
        g = -self.p * a ** (self.p - 1) * np.sign(w) / (2 * self.variance)
        return lp, g

    def sample(self, gen, size):
        # |w|^p / (2 variance) ~ Gamma(1/p, 1)
        g = gen.gamma(1.0 / self.p, 1.0, size)
        mag = (2 * self.variance * g) ** (1.0 / self.p)
        return np.where(gen.random(size) < 0.5, -mag, mag)

    @property
    def std(self):
        s = (2 * self.variance) ** (1.0 / self.p)
        return s * np.sqrt(special.gamma(3 / self.p) / special.gamma(1 / self.p))


IID_FAMILIES = {"gaussian": Gaussian, "laplace": Laplace, "student_t": StudentT, "exp_norm": ExpNorm}


# ---------------------------------------------------------------------------
# first-layer families


@dataclass(frozen=True, eq=False)
class CovariancePrior:
    """``N(0, cov)`` on every first-layer column (one column per hidden unit/filter).

    ``cov`` has dimension ``fan_in + 1`` when ``include_bias`` (bias coordinate
    last) and ``fan_in`` otherwise; in the latter case the bias falls back to
    the default family. ``data_mean`` is the per-feature shift removed before
    the covariance was formed.
    """

    cov: np.ndarray
    include_bias: bool
    data_mean: np.ndarray
    kind: str = "emp_cov"
    alpha: float = 1.0
    eps: float = 1e-4
    factor: np.ndarray = field(default=None, repr=False)
    eigenvalues: np.ndarray = field(default=None, repr=False)
    eigenvectors: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "cov", cov)
        if self.factor is None:
            object.__setattr__(self, "factor", cholesky(cov))
        if self.eigenvalues is None:
            w, v = eigh_symmetric(cov)
            object.__setattr__(self, "eigenvalues", w)
            object.__setattr__(self, "eigenvectors", v)
        linv = np.linalg.inv(self.factor)
        object.__setattr__(self, "_precision", linv.T @ linv)
        object.__setattr__(self, "_logdet", 2.0 * np.log(np.diag(self.factor)).sum())

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    @property
    def std(self):
        return float(np.sqrt(np.mean(np.diag(self.cov))))

    def logpdf_grad(self, cols: np.ndarray):
        """``cols`` has shape ``(dim, width)``."""
        pw = self._precision @ cols
        lp = -0.5 * np.sum(cols * pw) - 0.5 * cols.shape[1] * (self.dim * LOG2PI + self._logdet)
        return lp, -pw

    def sample_cols(self, gen, width):
        return self.factor @ gen.standard_normal((self.dim, width))

    def variance_along(self, direction) -> float:
        d = np.asarray(direction, dtype=np.float64)
        if d.size == self.dim - 1 and self.include_bias:
            d = np.append(d, 0.0)
        d = d / np.linalg.norm(d)
        return float(d @ self.cov @ d)

    def save(self, path) -> None:
        header = {
            "dim": self.dim,
            "mean_len": int(self.data_mean.size),
            "include_bias": bool(self.include_bias),
            "kind": self.kind,
            "alpha": self.alpha,
            "eps": self.eps,
        }
        io.write_sidecar(path, b"BNNCOV01", header, [self.factor, self.data_mean])

    @classmethod
    def load(cls, path) -> "CovariancePrior":
        h, body = io.read_sidecar(path, b"BNNCOV01")
        d, m = h["dim"], h["mean_len"]
        if body.size != d * d + m:
            raise io.FormatError(f"{path}: expected {d * d + m} floats, found {body.size}")
        L = body[: d * d].reshape(d, d)
        return cls(L @ L.T, h["include_bias"], body[d * d :], h["kind"], h["alpha"], h["eps"], factor=L)


@dataclass(frozen=True)
class SumFilter:
    """Gaussian ``N(0, variance)`` on first-layer filters and biases, times
    ``Laplace(sum(filter) | 0, gamma2)`` for every filter."""

    variance: float
    gamma2: float

    def __post_init__(self):
        if not (self.variance > 0 and self.gamma2 > 0):
            raise ConfigError("sum_filter variance and gamma2 must be > 0")

    @property
    def std(self):
        return np.sqrt(self.variance)

    def logpdf_grad(self, cols: np.ndarray):
        """``cols`` is the ``(fan_in + 1, filters)`` first-layer matrix (bias last)."""
        lp, g = Gaussian(self.variance).logpdf_grad(cols.ravel())
        g = g.reshape(cols.shape)
        sums = cols[:-1].sum(axis=0)
        lp += -np.abs(sums).sum() / self.gamma2 - sums.size * np.log(2 * self.gamma2)
        g[:-1] -= np.sign(sums) / self.gamma2
        return lp, g

    def sample_cols(self, gen, fan_in, width):
        # Exact: the component along the all-ones direction has density
        # exp(-t^2 / 2v - sqrt(d) |t| / gamma2), a folded truncated normal.
        v, d = self.variance, fan_in
        sd = np.sqrt(v)
        w = sd * gen.standard_normal((d, width))
        u = np.ones(d) / np.sqrt(d)
        w -= np.outer(u, u @ w)
        mu = -np.sqrt(d) * v / self.gamma2
        a = (0.0 - mu) / sd
        t = stats.truncnorm.rvs(a, np.inf, loc=mu, scale=sd, size=width, random_state=gen)
        t = np.where(gen.random(width) < 0.5, -t, t)
        w += np.outer(u, t)
        b = sd * gen.standard_normal((1, width))
        return np.vstack([w, b])


# ---------------------------------------------------------------------------
# composite spec


@dataclass(frozen=True)
class PriorSpec:
    default: object
    first_layer: object = None

    def __post_init__(self):
        if not isinstance(self.default, tuple(IID_FAMILIES.values())):
            raise ConfigError("default prior must be an i.i.d. family")

    @property
    def std(self) -> float:
        """Scale used by the pi * sigma / 2 trajectory rule (largest family std)."""
        s = self.default.std
        if self.first_layer is not None:
            s = max(s, self.first_layer.std)
        return float(s)

    def bind(self, layout) -> "BoundPrior":
        return BoundPrior(self, tuple(layout))

    def logpdf_grad(self, params):
        return self.bind(params.layout).logpdf_grad(params.data)

    def to_dict(self) -> dict:
        return {"default": _family_dict(self.default), "first_layer": _family_dict(self.first_layer)}


def _family_dict(f):
    if f is None:
        return None
    if isinstance(f, CovariancePrior):
        return {"kind": f.kind, "alpha": f.alpha, "eps": f.eps, "dim": f.dim, "include_bias": f.include_bias}
    name = {v: k for k, v in IID_FAMILIES.items()}.get(type(f), "sum_filter")
    return {"kind": name, **f.__dict__}


class BoundPrior:
    """A :class:`PriorSpec` resolved against a concrete parameter layout."""

    def __init__(self, spec: PriorSpec, layout: tuple):
        self.spec = spec
        self.layout = layout
        self.n = layout[-1].offset + layout[-1].size
        names = [b.name for b in layout]
        self.first = None
        fl = spec.first_layer
        if fl is None:
            return
        if "W1" not in names or "b1" not in names:
            raise ConfigError("first-layer prior needs a model with a W1/b1 first layer")
        w1 = layout[names.index("W1")]
        b1 = layout[names.index("b1")]
        width = b1.shape[0]
        fan_in = w1.size // width
        if isinstance(fl, SumFilter) and len(w1.shape) != 4:
            raise ConfigError("sum_filter prior applies to convolutional first layers only")
        if isinstance(fl, CovariancePrior):
            need = fan_in + 1 if fl.include_bias else fan_in
            if fl.dim != need:
                raise ShapeError(f"covariance prior of dim {fl.dim} does not match first layer ({need})")
        # the layout keeps W1 then b1 contiguously
        self.first = (w1.offset, fan_in, width)
        covered = (fan_in + 1) * width
        if isinstance(fl, CovariancePrior) and not fl.include_bias:
            covered = fan_in * width
        self.covered = covered

    def logpdf_grad(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n,):
            raise ShapeError(f"expected {self.n} parameters, got {theta.shape}")
        if self.first is None:
            return self.spec.default.logpdf_grad(theta)
        off, fan_in, width = self.first
        fl = self.spec.first_layer
        grad = np.empty_like(theta)
        end = off + self.covered
        if isinstance(fl, CovariancePrior):
            rows = fl.dim
            lp1, g1 = fl.logpdf_grad(theta[off:end].reshape(rows, width))
        else:
            lp1, g1 = fl.logpdf_grad(theta[off:end].reshape(fan_in + 1, width))
        grad[off:end] = g1.ravel()
        rest = np.r_[0:off, end : self.n]
        lp2, g2 = self.spec.default.logpdf_grad(theta[rest])
        grad[rest] = g2
        return lp1 + lp2, grad

    def sample(self, rng) -> np.ndarray:
        gen = rng_of(rng)
        theta = self.spec.default.sample(gen, self.n)
        if self.first is not None:
            off, fan_in, width = self.first
            fl = self.spec.first_layer
            if isinstance(fl, CovariancePrior):
                cols = fl.sample_cols(gen, width)
            else:
                cols = fl.sample_cols(gen, fan_in, width)
            theta[off : off + self.covered] = cols.ravel()
        return theta


def prior_logpdf_grad(prior: PriorSpec, params):
    return prior.logpdf_grad(params)


def sample_prior(prior: PriorSpec, layout, rng):
    from .models import ParamVector

    return ParamVector(prior.bind(layout).sample(rng), tuple(layout))


# ---------------------------------------------------------------------------
# data-driven constructions


def _centered(inputs):
    x = np.asarray(inputs, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        raise ConfigError("need at least 2 inputs to estimate a covariance")
    mean = x.mean(axis=0)
    return x - mean, mean


def build_empcov(inputs, alpha: float, eps: float = None, include_bias: bool = True) -> CovariancePrior:
    """EmpCov prior ``N(0, alpha * S + eps * I)`` from (patch) inputs.

    Inputs are centred first. With ``include_bias`` the bias joins as a
    constant-1 coordinate, so ``S`` is the second moment of the augmented
    centred inputs: the empirical covariance in the weight block, zero
    cross-terms and ``n / (n - 1)`` for the bias.
    """
    if not alpha > 0:
        raise ConfigError("alpha must be > 0")
    eps = 1e-4 * alpha if eps is None else eps
    if not eps > 0:
        raise ConfigError("eps must be > 0")
    xc, mean = _centered(inputs)
    n, m = xc.shape
    sigma = xc.T @ xc / (n - 1)
    sigma = 0.5 * (sigma + sigma.T)
    if include_bias:
        s = np.zeros((m + 1, m + 1))
        s[:m, :m] = sigma
        s[m, m] = n / (n - 1)
    else:
        s = sigma
    cov = alpha * s + eps * np.eye(len(s))
    return CovariancePrior(cov, include_bias, mean, "emp_cov", alpha, eps)


def build_pca_prior(inputs, alpha: float, eps: float = None, decay=0.5) -> CovariancePrior:
    """PCA prior ``N(0, alpha V diag(s) V^T + eps I)`` on first-layer weights.

    ``decay`` is either the rate ``lambda`` in ``s_i = lambda ** i`` (i from 1,
    components ordered by decreasing data variance) or an explicit spectrum.
    The bias is not covered.
    """
    if not alpha > 0:
        raise ConfigError("alpha must be > 0")
    eps = 1e-4 * alpha if eps is None else eps
    xc, mean = _centered(inputs)
    n, m = xc.shape
    sigma = xc.T @ xc / (n - 1)
    evals, v = eigh_symmetric(0.5 * (sigma + sigma.T))
    if np.ndim(decay) == 0:
        if not 0 < decay <= 1:
            raise ConfigError(f"decay must lie in (0, 1], got {decay}")
        s = float(decay) ** np.arange(1, m + 1)
    else:
        s = np.asarray(decay, dtype=np.float64)
        if s.shape != (m,):
            raise ShapeError(f"spectrum needs {m} entries")
    cov = alpha * (v * s) @ v.T + eps * np.eye(m)
    cov = 0.5 * (cov + cov.T)
    return CovariancePrior(cov, False, mean, "pca_decay", alpha, eps)


def build_sumfilter(variance: float, gamma2: float, spec) -> PriorSpec:
    """Gaussian prior everywhere plus a Laplace factor on first-layer filter sums."""
    if spec.kind != "cnn":
        raise ConfigError("sum_filter prior applies to convolutional first layers only")
    return PriorSpec(Gaussian(variance), SumFilter(variance, gamma2))


def data_null_directions(inputs, tol: float = 1e-8) -> np.ndarray:
    """Columns spanning directions along which the centred inputs have no variance."""
    xc, _ = _centered(inputs)
    sigma = xc.T @ xc / (len(xc) - 1)
    w, v = eigh_symmetric(0.5 * (sigma + sigma.T))
    scale = max(w[0], 1e-300)
    return v[:, w <= tol * scale]
