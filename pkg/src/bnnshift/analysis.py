"""Diagnostics: PCA, weight projections, prior-match tests, metrics and robustness curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import CorruptionSpec, corrupt, extract_patches
from .inference import Chain, Predictive, _sample_matrix, bma_predict
from .models import LabeledDataset, ModelSpec, ParamVector, first_layer_view
from .numkit import ConfigError, RngStream, ShapeError, eigh_symmetric
from .priors import PriorSpec


@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # columns, descending variance
    variances: np.ndarray

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return (x - self.mean) @ self.components


def empirical_covariance(inputs):
    """``(mean, Sigma)`` with ``Sigma = X_c^T X_c / (n - 1)`` on centred inputs."""
    x = np.asarray(inputs, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        raise ConfigError("need at least 2 inputs for a covariance")
    mean = x.mean(axis=0)
    xc = x - mean
    sigma = xc.T @ xc / (len(x) - 1)
    return mean, 0.5 * (sigma + sigma.T)


def pca(inputs=None, cov=None, mean=None) -> PcaBasis:
    if cov is None:
        mean, cov = empirical_covariance(inputs)
    cov = np.asarray(cov, dtype=np.float64)
    if mean is None:
        mean = np.zeros(len(cov))
    w, v = eigh_symmetric(cov)
    return PcaBasis(np.asarray(mean, dtype=np.float64), v, np.maximum(w, 0.0))


# ---------------------------------------------------------------------------
# prior matching


@dataclass(frozen=True)
class PriorMatch:
    z: float
    variance_ratio: float
    ks: float
    passed: bool
    n: int


def ks_statistic(a, b) -> float:
    return float(stats.ks_2samp(np.ravel(a), np.ravel(b)).statistic)


def prior_match_test(samples, prior_draws, prior_mean: float = None, prior_var: float = None,
                     z_max: float = 3.0, ratio_range=(0.85, 1.15), ks_max: float = 0.05) -> PriorMatch:
    """Do ``samples`` look like draws from the prior marginal?

    ``z`` compares the sample mean with the prior mean in units of the prior
    standard error, the variance ratio is sample/prior variance, and ``ks`` is
    the two-sample Kolmogorov-Smirnov statistic against ``prior_draws``.
    Prior moments default to those of ``prior_draws``.
    """
    s = np.ravel(np.asarray(samples, dtype=np.float64))
    d = np.ravel(np.asarray(prior_draws, dtype=np.float64))
    if s.size < 30:
        raise ConfigError(f"prior-match test needs >= 30 samples, got {s.size}")
    mu = float(d.mean()) if prior_mean is None else prior_mean
    var = float(d.var()) if prior_var is None else prior_var
    z = (s.mean() - mu) / np.sqrt(var / s.size)
    ratio = s.var(ddof=1) / var
    ks = ks_statistic(s, d)
    ok = abs(z) < z_max and ratio_range[0] <= ratio <= ratio_range[1] and ks < ks_max
    return PriorMatch(float(z), float(ratio), ks, bool(ok), int(s.size))


@dataclass(frozen=True)
class ProjectionReport:
    direction: int
    mean: float
    variance: float
    prior_variance: float
    ks: float
    z: float
    variance_ratio: float
    passed: bool
    max_abs: float
    n: int

    def row(self) -> dict:
        return dict(self.__dict__)


def _direction_matrix(directions, fan_in, include_bias, c0):
    """Directions as rows of length ``fan_in + 1`` (bias coefficient last)."""
    if isinstance(directions, PcaBasis):
        d = directions.components.T
    else:
        d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    k = len(d)
    if d.shape[1] == fan_in + 1:
        full = d.copy()
    elif d.shape[1] == fan_in:
        full = np.zeros((k, fan_in + 1))
        full[:, :fan_in] = d
        if include_bias:
            full[:, fan_in] = -np.broadcast_to(np.asarray(c0, dtype=np.float64), (k,))
    else:
        raise ShapeError(f"direction length {d.shape[1]} does not match first layer fan-in {fan_in}")
    return full


def first_layer_projections(samples, spec: ModelSpec, directions, include_bias: bool = False, c0=0.0) -> np.ndarray:
    """Projections ``sum_i d_i w_ij + d_bias b_j``, shape ``(directions, samples * units)``.

    Directions are used as given (callers normalise them); with
    ``include_bias`` and fan-in-length directions the bias coefficient is
    ``-c0`` per direction.
    """
    mat = _sample_matrix(samples)
    fan_in = spec.first_layer_fan_in
    full = _direction_matrix(directions, fan_in, include_bias, c0)
    out = []
    for theta in mat:
        view = first_layer_view(spec, theta)
        if spec.kind in ("nalu", "linear"):
            out.append(full[:, :fan_in] @ view)
        else:
            out.append(full @ view)
    # (samples, directions, units) -> (directions, samples * units)
    arr = np.stack(out)
    return arr.transpose(1, 0, 2).reshape(len(full), -1)


def project_first_layer(samples, spec: ModelSpec, directions, prior: PriorSpec, include_bias: bool = False,
                        c0=0.0, n_prior: int = 10_000, seed: int = 0, **thresholds) -> list:
    """Pooled-over-units projection statistics with a prior-match test per direction."""
    proj = first_layer_projections(samples, spec, directions, include_bias, c0)
    width = max(1, spec.first_layer_width if spec.kind not in ("nalu", "linear") else spec.n_out)
    n_draws = int(np.ceil(n_prior / width))
    bound = prior.bind(spec.layout())
    root = RngStream(seed, 7)
    prior_thetas = np.array([bound.sample(root.split(i)) for i in range(n_draws)])
    pproj = first_layer_projections(prior_thetas, spec, directions, include_bias, c0)
    reports = []
    for k in range(len(proj)):
        s, d = proj[k], pproj[k]
        pm = prior_match_test(s, d, prior_mean=0.0, **thresholds)
        reports.append(ProjectionReport(
            k, float(s.mean()), float(s.var(ddof=1)), float(d.var()), pm.ks, pm.z, pm.variance_ratio,
            pm.passed, float(np.max(np.abs(s))), int(s.size)))
    return reports


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricBundle:
    accuracy: float
    nll: float
    ece: float
    bins: int = 15

    def row(self) -> dict:
        return dict(self.__dict__)


def metrics_from_probs(probs, labels, bins: int = 15) -> MetricBundle:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if probs.ndim == 1 or probs.shape[1] == 1:
        p1 = probs.reshape(-1)
        probs = np.stack([1 - p1, p1], axis=1)
    if len(probs) == 0:
        raise ConfigError("no predictions to evaluate")
    pred = probs.argmax(axis=1)
    correct = pred == labels
    p_true = probs[np.arange(len(labels)), labels]
    nll = float(-np.mean(np.log(np.maximum(p_true, 1e-300))))
    conf = probs.max(axis=1)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    ece = 0.0
    for b in range(bins):
        mask = idx == b
        if mask.any():
            ece += mask.mean() * abs(correct[mask].mean() - conf[mask].mean())
    return MetricBundle(float(correct.mean()), nll, float(ece), bins)


def predictive(spec: ModelSpec, predictor, inputs) -> Predictive:
    if isinstance(predictor, Predictive):
        return predictor
    return bma_predict(predictor, spec, inputs)


def evaluate(spec: ModelSpec, predictor, data: LabeledDataset, bins: int = 15) -> MetricBundle:
    """Accuracy, NLL and ECE of a chain, MAP vector or ensemble on ``data``."""
    pred = predictive(spec, predictor, data.inputs)
    return metrics_from_probs(pred.mean, data.targets, bins)


def robustness_curve(spec: ModelSpec, predictors: dict, clean: LabeledDataset, corruption: CorruptionSpec,
                     magnitudes, seed: int = 0) -> list:
    """Metrics per (magnitude, predictor); one noise realisation scaled across magnitudes."""
    mags = [float(m) for m in magnitudes]
    if not mags or mags[0] != 0.0 or any(b < a for a, b in zip(mags, mags[1:])):
        raise ConfigError("magnitudes must be ascending and start at 0")
    rows = []
    for mag in mags:
        data = clean if mag == 0.0 else corrupt(clean, corruption.scaled(mag), RngStream(seed, 11))
        for name, pred in predictors.items():
            m = evaluate(spec, pred, data)
            rows.append({"magnitude": mag, "predictor": name, **m.row()})
    return rows


def accuracy_at(rows: list, predictor: str, magnitude: float) -> float:
    for r in rows:
        if r["predictor"] == predictor and r["magnitude"] == magnitude:
            return r["accuracy"]
    raise KeyError((predictor, magnitude))


# ---------------------------------------------------------------------------
# corruption spectra


def _as_rows(x, kernel, padding, interior):
    x = np.asarray(x, dtype=np.float64)
    if kernel is None:
        return x.reshape(len(x), -1)
    if interior:
        # drop patches touching the outer `interior` pixels of each image
        n, h, w = x.shape[:3]
        p = extract_patches(x, kernel, padding)
        oh = h - kernel + 1 + (2 * (kernel // 2) if padding else 0)
        ow = w - kernel + 1 + (2 * (kernel // 2) if padding else 0)
        grid = p.reshape(n, oh, ow, -1)
        return grid[:, interior:oh - interior, interior:ow - interior].reshape(-1, p.shape[1])
    return extract_patches(x, kernel, padding)


def corruption_spectrum(clean, corrupted, basis: PcaBasis, kernel: int = None, padding: bool = False,
                        interior: int = 0) -> list:
    """Variance of clean and corrupted inputs (or their patches) along each basis component."""
    a = _as_rows(clean.inputs if isinstance(clean, LabeledDataset) else clean, kernel, padding, interior)
    b = _as_rows(corrupted.inputs if isinstance(corrupted, LabeledDataset) else corrupted, kernel, padding, interior)
    if a.shape[1] != basis.dim or b.shape[1] != basis.dim:
        raise ShapeError("inputs and basis dimensions disagree")
    va = basis.project(a).var(axis=0, ddof=1)
    vb = basis.project(b).var(axis=0, ddof=1)
    return [
        {"component": i, "reference_variance": float(basis.variances[i]), "before": float(va[i]),
         "after": float(vb[i]), "increase": float(vb[i] - va[i])}
        for i in range(basis.dim)
    ]


# ---------------------------------------------------------------------------
# chain diagnostics


def effective_sample_size(x) -> float:
    """ESS of a scalar chain via Geyer's initial monotone positive sequence."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 4:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    if acov[0] <= 0:
        return float(n)
    rho = acov / acov[0]
    pairs = []
    for k in range(0, n - 1, 2):
        s = rho[k] + rho[k + 1]
        if s <= 0:
            break
        pairs.append(s)
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    return float(n / max(tau, 1.0 / np.log10(max(n, 10))))


def mc_standard_error(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1) / np.sqrt(effective_sample_size(x)))


def total_variation(p, q) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def is_separable(z, eps: float) -> np.ndarray:
    """Rows whose top logit beats every other by more than ``eps``."""
    z = np.atleast_2d(z)
    top2 = np.sort(z, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0] > eps
