"""Full-batch HMC, MAP optimisation, deep ensembles and model averaging."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import io
from .models import LabeledDataset, ModelSpec, ParamVector, forward, init_uniform, loglik_and_grad, prepare
from .numkit import ConfigError, NumericError, RngStream, rng_of
from .priors import PriorSpec

log = logging.getLogger(__name__)


class Posterior:
    """Tempered log posterior ``(log p(D|w) + log p(w)) / T`` and its gradient."""

    def __init__(self, spec: ModelSpec, prior: PriorSpec, data: LabeledDataset = None, temperature: float = 1.0):
        if not temperature > 0:
            raise ConfigError("temperature must be > 0")
        self.spec = spec
        self.prior = prior.bind(spec.layout())
        self.data = data
        self.temperature = temperature
        self.prep = prepare(spec, data.inputs) if data is not None else None

    def __call__(self, theta):
        lp, g = self.prior.logpdf_grad(theta)
        if self.data is not None:
            ll, gl = loglik_and_grad(self.spec, theta, self.prep, self.data.targets)
            lp, g = lp + ll, g + gl
        return lp / self.temperature, g / self.temperature


# ---------------------------------------------------------------------------
# leapfrog


class Trajectory(NamedTuple):
    q: np.ndarray
    p: np.ndarray
    diverged: bool


def _leapfrog(q, p, fn, step, steps, logp, grad):
    q = q.copy()
    p = p.copy()
    if steps == 0:
        return q, p, logp, grad, False
    p += 0.5 * step * grad
    for i in range(steps):
        q += step * p
        try:
            logp, grad = fn(q)
        except (NumericError, FloatingPointError):
            return q, p, -np.inf, grad, True
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            return q, p, -np.inf, grad, True
        p += (step if i < steps - 1 else 0.5 * step) * grad
    return q, p, logp, grad, False


def leapfrog_trajectory(q, p, grad_fn, step: float, steps: int) -> Trajectory:
    """Integrate Hamiltonian dynamics with unit mass for ``steps`` leapfrog steps.

    ``grad_fn(q)`` returns the gradient of the log target density.
    """
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)

    def fn(x):
        return 0.0, np.asarray(grad_fn(x), dtype=np.float64)

    _, g0 = fn(q)
    q1, p1, _, _, bad = _leapfrog(q, p, fn, step, int(steps), 0.0, g0)
    return Trajectory(q1, p1, bad)


# ---------------------------------------------------------------------------
# HMC


@dataclass
class HmcConfig:
    step_size: float = 0.01
    leapfrog_steps: int = 10
    trajectory: str = "explicit"  # or "pi_sigma_half"
    num_iterations: int = 100
    burn_in: int = None  # default: 10% of num_iterations
    temperature: float = 1.0
    seed: int = 0
    adapt_step: bool = True
    pilot_rounds: int = 8
    pilot_iterations: int = 10
    pilot_min_rounds: int = 1  # keep adapting for at least this many rounds
    target_accept: tuple = (0.6, 0.95)
    init: str = "prior"  # or "zeros"

    def __post_init__(self):
        if self.burn_in is None:
            self.burn_in = self.num_iterations // 10
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if not 0 <= self.burn_in < self.num_iterations:
            raise ConfigError("burn_in must lie in [0, num_iterations)")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.trajectory not in ("explicit", "pi_sigma_half"):
            raise ConfigError(f"unknown trajectory rule {self.trajectory!r}")
        self.target_accept = tuple(self.target_accept)

    def trajectory_length(self, prior: PriorSpec) -> float:
        """``pi * sigma / 2`` with sigma the prior std scaled by sqrt(T)."""
        return np.pi * prior.std * np.sqrt(self.temperature) / 2

    def resolved(self, prior: PriorSpec, step: float = None) -> tuple:
        """(step size, leapfrog steps) after applying the trajectory rule."""
        step = self.step_size if step is None else step
        if self.trajectory == "explicit":
            return step, self.leapfrog_steps
        tau = self.trajectory_length(prior)
        steps = max(1, int(np.ceil(tau / step - 1e-9)))
        return tau / steps, steps


@dataclass
class Chain:
    samples: np.ndarray
    accepted: np.ndarray
    energies: np.ndarray
    layout: tuple
    config: dict
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def accept_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self.accepted) else float("nan")

    def params(self, i: int) -> ParamVector:
        return ParamVector(self.samples[i], self.layout)

    def save(self, prefix) -> None:
        """Write ``<prefix>.bin`` (float64 samples) and ``<prefix>.json`` (metadata)."""
        header = {
            "layout": [[b.name, list(b.shape), b.offset] for b in self.layout],
            "n_samples": int(self.samples.shape[0]),
            "dim": int(self.samples.shape[1]),
        }
        io.write_sidecar(f"{prefix}.bin", b"BNNCHN01", header, [self.samples])
        io.write_json(
            f"{prefix}.json",
            {
                "config": self.config,
                "accept_rate": self.accept_rate,
                "accepted": self.accepted.astype(int),
                "energies": self.energies,
                "meta": self.meta,
            },
        )

    @classmethod
    def load(cls, prefix) -> "Chain":
        from .models import Block

        h, body = io.read_sidecar(f"{prefix}.bin", b"BNNCHN01")
        if body.size != h["n_samples"] * h["dim"]:
            raise io.FormatError(f"{prefix}.bin: expected {h['n_samples'] * h['dim']} floats, found {body.size}")
        layout = tuple(Block(n, tuple(s), o) for n, s, o in h["layout"])
        meta = json.loads(open(f"{prefix}.json", encoding="utf-8").read())
        return cls(
            body.reshape(h["n_samples"], h["dim"]),
            np.asarray(meta["accepted"], dtype=bool),
            np.asarray(meta["energies"], dtype=np.float64),
            layout,
            meta["config"],
            meta["meta"],
        )


def _hmc_step(q, logp, grad, fn, step, steps, gen):
    p0 = gen.standard_normal(q.size)
    h0 = -logp + 0.5 * p0 @ p0
    q1, p1, logp1, grad1, bad = _leapfrog(q, p0, fn, step, steps, logp, grad)
    h1 = -logp1 + 0.5 * p1 @ p1 if not bad else np.inf
    u = gen.random()
    if not bad and np.log(u) < h0 - h1:
        return q1, logp1, grad1, True, h1
    return q, logp, grad, False, h0


def hmc_sample(spec: ModelSpec, prior: PriorSpec, data: LabeledDataset, cfg: HmcConfig, init=None) -> Chain:
    """Metropolis-adjusted HMC targeting ``(p(D|w) p(w)) ** (1/T)``.

    ``data=None`` samples the (tempered) prior. The step size is tuned by a
    short pilot when ``cfg.adapt_step``; pilot draws are discarded.
    """
    fn = Posterior(spec, prior, data, cfg.temperature)
    gen = RngStream(cfg.seed, 1).generator()
    if init is not None:
        q = np.array(init.data if isinstance(init, ParamVector) else init, dtype=np.float64)
    elif cfg.init == "zeros":
        q = np.zeros(spec.n_params)
    else:
        q = prior.bind(spec.layout()).sample(RngStream(cfg.seed, 2))
    logp, grad = fn(q)

    step = cfg.step_size
    if cfg.adapt_step:
        lo, hi = cfg.target_accept
        for r in range(cfg.pilot_rounds):
            s, n = cfg.resolved(prior, step)
            acc = 0
            for _ in range(cfg.pilot_iterations):
                q, logp, grad, a, _ = _hmc_step(q, logp, grad, fn, s, n, gen)
                acc += a
            rate = acc / cfg.pilot_iterations
            if rate < lo:
                step *= 0.6
            elif rate > hi:
                step *= 1.25
            elif r + 1 >= cfg.pilot_min_rounds:
                break
    step, steps = cfg.resolved(prior, step)

    samples, accepted, energies = [], [], []
    for it in range(cfg.num_iterations):
        q, logp, grad, a, h = _hmc_step(q, logp, grad, fn, step, steps, gen)
        if it >= cfg.burn_in:
            samples.append(q.copy())
            accepted.append(a)
            energies.append(h)
    chain = Chain(
        np.array(samples),
        np.array(accepted, dtype=bool),
        np.array(energies),
        spec.layout(),
        asdict(cfg),
        {"step_size": step, "leapfrog_steps": steps, "warnings": []},
    )
    if chain.accept_rate < 0.1:
        msg = f"low acceptance rate {chain.accept_rate:.3f}"
        chain.meta["warnings"].append(msg)
        log.warning(msg)
    return chain


# ---------------------------------------------------------------------------
# MAP


class OptimizationError(RuntimeError):
    def __init__(self, msg, last_params=None):
        super().__init__(msg)
        self.last_params = last_params


@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # sgd | adam | adadelta
    lr: float = 0.05
    schedule: str = "cosine"  # constant | cosine
    momentum: float = 0.9
    weight_decay: float = None  # None: use the prior; else lambda/2 ||w||^2 on the mean loss
    epochs: int = 2000
    batch_size: int = None  # None: full batch
    init_bound: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam", "adadelta"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        for name in ("lr", "momentum", "init_bound"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.weight_decay is not None and self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


def _objective(spec, prior, data, cfg):
    """Mean negative log posterior per data point (or penalised NLL)."""
    bound = prior.bind(spec.layout()) if cfg.weight_decay is None else None
    n = len(data)

    def fn(theta, prep, targets):
        ll, g = loglik_and_grad(spec, theta, prep, targets)
        b = len(targets)
        loss, grad = -ll / b, -g / b
        if bound is not None:
            lp, gp = bound.logpdf_grad(theta)
            loss, grad = loss - lp / n, grad - gp / n
        elif cfg.weight_decay:
            loss += 0.5 * cfg.weight_decay * theta @ theta
            grad = grad + cfg.weight_decay * theta
        return loss, grad

    return fn


def map_fit(spec: ModelSpec, prior: PriorSpec, data: LabeledDataset, cfg: OptimizerConfig, init=None, stream: int = 0) -> ParamVector:
    """Minimise ``-(log p(D|w) + log p(w)) / n`` from a ``U(-b, b)`` start.

    The returned vector carries the per-epoch loss trace in ``info["losses"]``.
    """
    rs = RngStream(cfg.seed, stream)
    theta = (init.data.copy() if init is not None else init_uniform(spec, cfg.init_bound, rs.split(0)).data)
    gen = rs.split(1).generator()
    fn = _objective(spec, prior, data, cfg)
    prep_full = prepare(spec, data.inputs)
    n = len(data)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    steps_per_epoch = int(np.ceil(n / bs))
    total = cfg.epochs * steps_per_epoch

    vel = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    acc_dx = np.zeros_like(theta)
    losses = []
    t = 0
    last_good = theta.copy()
    for epoch in range(cfg.epochs):
        order = gen.permutation(n) if bs < n else None
        for b in range(steps_per_epoch):
            if order is None:
                prep, targets = prep_full, data.targets
            else:
                idx = order[b * bs : (b + 1) * bs]
                prep, targets = prepare(spec, data.inputs[idx]), data.targets[idx]
            loss, g = fn(theta, prep, targets)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise OptimizationError(f"loss diverged at epoch {epoch}", ParamVector(last_good, spec.layout()))
            last_good = theta.copy()
            lr = cfg.lr if cfg.schedule == "constant" else 0.5 * cfg.lr * (1 + np.cos(np.pi * t / total))
            t += 1
            if cfg.kind == "sgd":
                vel = cfg.momentum * vel + g
                theta = theta - lr * vel
            elif cfg.kind == "adam":
                b1, b2 = cfg.momentum, 0.999
                vel = b1 * vel + (1 - b1) * g
                m2 = b2 * m2 + (1 - b2) * g * g
                theta = theta - lr * (vel / (1 - b1**t)) / (np.sqrt(m2 / (1 - b2**t)) + 1e-8)
            else:
                rho, eps = 0.9, 1e-6
                m2 = rho * m2 + (1 - rho) * g * g
                dx = np.sqrt(acc_dx + eps) / np.sqrt(m2 + eps) * g
                acc_dx = rho * acc_dx + (1 - rho) * dx * dx
                theta = theta - lr * dx
        losses.append(float(loss))
    if not np.all(np.isfinite(theta)):
        raise OptimizationError("non-finite final iterate", ParamVector(last_good, spec.layout()))
    return ParamVector(theta, spec.layout(), {"losses": losses})


def ensemble_fit(spec, prior, data, cfg: OptimizerConfig, n: int) -> list:
    """``n`` MAP fits; member ``i`` draws its init from stream ``i`` of the seed."""
    if n < 1:
        raise ConfigError("ensemble needs n >= 1")
    return [map_fit(spec, prior, data, cfg, stream=i) for i in range(n)]


# ---------------------------------------------------------------------------
# prediction


class Predictive(NamedTuple):
    mean: np.ndarray
    var: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.mean, axis=1)


def _sample_matrix(samples) -> np.ndarray:
    if isinstance(samples, Chain):
        return samples.samples
    if isinstance(samples, ParamVector):
        return samples.data[None, :]
    if isinstance(samples, np.ndarray) and samples.ndim == 2:
        return samples
    return np.array([s.data if isinstance(s, ParamVector) else s for s in samples])


def bma_predict(samples, spec: ModelSpec, inputs) -> Predictive:
    """Average of link outputs over posterior samples, with per-output variance."""
    mat = _sample_matrix(samples)
    if len(mat) == 0:
        raise ConfigError("model average needs at least one sample")
    prep = prepare(spec, inputs)
    mean = None
    sq = None
    for theta in mat:
        out = forward(spec, theta, prep)
        mean = out.copy() if mean is None else mean + out
        sq = out * out if sq is None else sq + out * out
    mean /= len(mat)
    var = np.maximum(sq / len(mat) - mean * mean, 0.0)
    return Predictive(mean, var)
