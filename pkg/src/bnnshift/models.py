"""Forward passes and reverse-mode gradients for the supported architectures.

Four model kinds share a flat parameter vector:

* ``mlp``: ``x -> act(x W1 + b1) -> ... -> W_L, b_L -> link``
* ``cnn``: one stride-1 convolution (K x K x C x F filters) with optional 2x2
  average pooling, followed by a dense head as in ``mlp``
* ``nalu``: ``prod_j x_j ** w_j`` evaluated as ``exp(sum_j w_j log x_j)``
* ``linear``: ``x W`` with no bias (inputs are already basis features)

Biases are explicit. The first layer's weight block is stored immediately
before its bias block so the pair can be viewed as one ``(fan_in + 1, width)``
matrix without copying.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numkit import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("relu", "leaky_relu", "identity")
LINKS = {"categorical": "softmax", "gaussian": "identity", "bernoulli": "sigmoid"}


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple
    n_out: int = 2
    hidden: tuple = ()
    activation: str = "relu"
    leaky_slope: float = 0.01
    likelihood: str = "categorical"
    noise_var: float = 1.0
    kernel: int = 3
    filters: int = 4
    padding: bool = False
    pool: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("mlp", "cnn", "nalu", "linear"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.likelihood not in LINKS:
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")
        if self.likelihood == "gaussian" and not self.noise_var > 0:
            raise ConfigError("gaussian likelihood needs noise_var > 0")
        if self.likelihood == "bernoulli" and self.n_out != 1:
            raise ConfigError("bernoulli likelihood needs n_out == 1")
        if self.kind == "cnn":
            if len(self.input_shape) != 3:
                raise ConfigError("cnn input_shape must be (H, W, C)")
            oh, ow = self.conv_out_hw
            if oh < 1 or ow < 1:
                raise ConfigError(f"kernel {self.kernel} larger than padded image")
        elif len(self.input_shape) != 1:
            raise ConfigError(f"{self.kind} input_shape must be (m,)")
        if self.kind == "nalu" and (self.n_out != 1 or self.likelihood != "gaussian"):
            raise ConfigError("nalu is a scalar regression unit (n_out=1, gaussian likelihood)")

    @property
    def link(self) -> str:
        return LINKS[self.likelihood]

    @property
    def conv_out_hw(self) -> tuple:
        h, w, _ = self.input_shape
        pad = self.kernel // 2 if self.padding else 0
        return h + 2 * pad - self.kernel + 1, w + 2 * pad - self.kernel + 1

    @property
    def pooled_hw(self) -> tuple:
        oh, ow = self.conv_out_hw
        return (oh // 2, ow // 2) if self.pool else (oh, ow)

    def layout(self) -> tuple:
        shapes = []
        if self.kind in ("nalu", "linear"):
            m = self.input_shape[0]
            shapes.append(("w", (m,) if self.kind == "nalu" else (m, self.n_out)))
        else:
            if self.kind == "mlp":
                fan_in = self.input_shape[0]
                widths = self.hidden + (self.n_out,)
                start = 1
            else:
                c = self.input_shape[2]
                shapes.append(("W1", (self.kernel, self.kernel, c, self.filters)))
                shapes.append(("b1", (self.filters,)))
                ph, pw = self.pooled_hw
                fan_in = ph * pw * self.filters
                widths = self.hidden + (self.n_out,)
                start = 2
            for i, width in enumerate(widths):
                shapes.append((f"W{start + i}", (fan_in, width)))
                shapes.append((f"b{start + i}", (width,)))
                fan_in = width
        blocks, offset = [], 0
        for name, shape in shapes:
            blocks.append(Block(name, shape, offset))
            offset += int(np.prod(shape))
        return tuple(blocks)

    @property
    def n_params(self) -> int:
        last = self.layout()[-1]
        return last.offset + last.size

    @property
    def first_layer_width(self) -> int:
        if self.kind == "mlp":
            return (self.hidden + (self.n_out,))[0]
        if self.kind == "cnn":
            return self.filters
        return 1

    @property
    def first_layer_fan_in(self) -> int:
        if self.kind == "cnn":
            return self.kernel * self.kernel * self.input_shape[2]
        return self.input_shape[0]

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class ParamVector:
    data: np.ndarray
    layout: tuple
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        last = self.layout[-1]
        if self.data.shape != (last.offset + last.size,):
            raise ShapeError(f"parameter vector of length {self.data.size} does not tile layout")

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamVector":
        return cls(np.zeros(spec.n_params), spec.layout())

    def block(self, name: str) -> np.ndarray:
        for b in self.layout:
            if b.name == name:
                return self.data[b.offset : b.offset + b.size].reshape(b.shape)
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout, dict(self.info))


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if len(self.inputs) < 1 or len(self.inputs) != len(self.targets):
            raise ShapeError("dataset needs n >= 1 inputs with one target each")
        if not np.all(np.isfinite(self.inputs)):
            raise NumericError("dataset inputs must be finite")

    def __len__(self) -> int:
        return len(self.inputs)

    def with_inputs(self, inputs, **meta) -> "LabeledDataset":
        return replace(self, inputs=inputs, meta={**self.meta, **meta})


def first_layer_block_names(spec: ModelSpec) -> tuple:
    return ("w",) if spec.kind in ("nalu", "linear") else ("W1", "b1")


def first_layer_view(spec: ModelSpec, params) -> np.ndarray:
    """Read-only ``(fan_in + 1, width)`` view of the first layer (weights, then bias row).

    For ``nalu``/``linear`` kinds there is no bias and the plain weight block
    is returned as a column matrix.
    """
    data = params.data if isinstance(params, ParamVector) else np.asarray(params)
    fan_in, width = spec.first_layer_fan_in, spec.first_layer_width
    if spec.kind in ("nalu", "linear"):
        view = data[: fan_in * spec.n_out].reshape(fan_in, -1)
    else:
        view = data[: (fan_in + 1) * width].reshape(fan_in + 1, width)
    view = view.view()
    view.flags.writeable = False
    return view


# ---------------------------------------------------------------------------
# input preparation


def im2col(images: np.ndarray, k: int, padding: bool) -> np.ndarray:
    """Flattened K x K x C patches, rows ordered by (image, y, x)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise ShapeError(f"images must be (n, H, W, C), got {images.shape}")
    if padding:
        p = k // 2
        images = np.pad(images, ((0, 0), (p, p), (p, p), (0, 0)))
    n, h, w, c = images.shape
    if k > h or k > w:
        raise ShapeError(f"kernel {k} larger than (padded) image {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(images, (k, k), axis=(1, 2))
    # win: (n, oh, ow, C, k, k) -> (n, oh, ow, k, k, C)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(-1, k * k * c)


@dataclass(frozen=True)
class Prepared:
    """Model-specific features derived once from raw inputs."""

    n: int
    feats: np.ndarray


def prepare(spec: ModelSpec, x) -> Prepared:
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "cnn":
        shape = spec.input_shape
        if x.ndim == 3 and shape[2] == 1:
            x = x[..., None]
        if x.shape[1:] != shape:
            raise ShapeError(f"expected images of shape {shape}, got {x.shape[1:]}")
        return Prepared(len(x), im2col(x, spec.kernel, spec.padding))
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_shape[0]:
        raise ShapeError(f"expected inputs with {spec.input_shape[0]} features, got {x.shape}")
    if spec.kind == "nalu":
        if np.any(x <= 0):
            raise DomainError("nalu requires strictly positive inputs")
        return Prepared(len(x), np.log(x))
    return Prepared(len(x), x)


# ---------------------------------------------------------------------------
# forward / backward


def _act(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    if spec.activation == "leaky_relu":
        return np.where(z > 0, z, spec.leaky_slope * z)
    return z


def _act_grad(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    if spec.activation == "relu":
        return (z > 0).astype(np.float64)
    if spec.activation == "leaky_relu":
        return np.where(z > 0, 1.0, spec.leaky_slope)
    return np.ones_like(z)


def activation(spec: ModelSpec, z) -> np.ndarray:
    return _act(spec, np.asarray(z, dtype=np.float64))


def _pool(a: np.ndarray) -> np.ndarray:
    n, h, w, f = a.shape
    a = a[:, : h // 2 * 2, : w // 2 * 2]
    return a.reshape(n, h // 2, 2, w // 2, 2, f).mean(axis=(2, 4))


def _unpool(g: np.ndarray, shape: tuple) -> np.ndarray:
    out = np.zeros(shape)
    n, ph, pw, f = g.shape
    spread = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
    out[:, : ph * 2, : pw * 2] = spread
    return out


def _views(spec: ModelSpec, theta: np.ndarray) -> dict:
    return {b.name: theta[b.offset : b.offset + b.size].reshape(b.shape) for b in spec.layout()}


def _dense_names(spec: ModelSpec) -> list:
    start = 1 if spec.kind == "mlp" else 2
    count = len(spec.hidden) + 1
    return [(f"W{start + i}", f"b{start + i}") for i in range(count)]


def _forward_raw(spec: ModelSpec, theta: np.ndarray, prep: Prepared, keep: bool = False):
    """Pre-link outputs ``(n, n_out)`` plus the tape needed by backward."""
    p = _views(spec, theta)
    tape = []
    if spec.kind == "nalu":
        out = np.exp(prep.feats @ p["w"])[:, None]
        return out, tape
    if spec.kind == "linear":
        return prep.feats @ p["w"], tape
    if spec.kind == "cnn":
        k, c, f = spec.kernel, spec.input_shape[2], spec.filters
        z = prep.feats @ p["W1"].reshape(k * k * c, f) + p["b1"]
        oh, ow = spec.conv_out_hw
        z = z.reshape(prep.n, oh, ow, f)
        a = _act(spec, z)
        if spec.pool:
            a = _pool(a)
        h = a.reshape(prep.n, -1)
        if keep:
            tape.append(z)
    else:
        h = prep.feats
    names = _dense_names(spec)
    for i, (wn, bn) in enumerate(names):
        z = h @ p[wn] + p[bn]
        if keep:
            tape.append((h, z))
        if i < len(names) - 1:
            h = _act(spec, z)
        else:
            h = z
    return h, tape


def _link(spec: ModelSpec, out: np.ndarray) -> np.ndarray:
    if spec.link == "softmax":
        e = np.exp(out - out.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    if spec.link == "sigmoid":
        return 1.0 / (1.0 + np.exp(-out))
    return out


def _theta(params) -> np.ndarray:
    return params.data if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)


def forward(spec: ModelSpec, params, x, raw: bool = False) -> np.ndarray:
    """Link outputs of shape ``(n, n_out)`` (probabilities for softmax).

    With ``raw=True`` the pre-link outputs (logits) are returned instead.
    """
    prep = x if isinstance(x, Prepared) else prepare(spec, x)
    theta = _theta(params)
    if theta.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got {theta.shape}")
    out, _ = _forward_raw(spec, theta, prep)
    return out if raw else _link(spec, out)


def _point_loglik(spec: ModelSpec, out: np.ndarray, targets: np.ndarray):
    """Per-point log-likelihood and its gradient wrt pre-link outputs."""
    if spec.likelihood == "categorical":
        y = targets.astype(np.int64)
        if np.any(y < 0) or np.any(y >= spec.n_out):
            raise ShapeError("class targets out of range")
        shift = out.max(axis=1, keepdims=True)
        lse = shift[:, 0] + np.log(np.exp(out - shift).sum(axis=1))
        rows = np.arange(len(y))
        ll = out[rows, y] - lse
        g = -np.exp(out - lse[:, None])
        g[rows, y] += 1.0
        return ll, g
    if spec.likelihood == "bernoulli":
        y = targets.reshape(-1).astype(np.float64)
        f = out[:, 0]
        ll = y * f - np.logaddexp(0.0, f)
        g = (y - 1.0 / (1.0 + np.exp(-f)))[:, None]
        return ll, g
    y = targets.reshape(out.shape).astype(np.float64)
    r = y - out
    s2 = spec.noise_var
    ll = (-0.5 * r * r / s2 - 0.5 * np.log(2 * np.pi * s2)).sum(axis=1)
    return ll, r / s2


def log_likelihood(spec: ModelSpec, params, data: LabeledDataset, prep: Prepared = None) -> float:
    prep = prep or prepare(spec, data.inputs)
    out, _ = _forward_raw(spec, _theta(params), prep)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite network output")
    ll, _ = _point_loglik(spec, out, data.targets)
    return float(ll.sum())


def loglik_and_grad(spec: ModelSpec, theta: np.ndarray, prep: Prepared, targets: np.ndarray):
    """Total log-likelihood and its exact gradient by reverse accumulation."""
    out, tape = _forward_raw(spec, theta, prep, keep=True)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite network output")
    ll, g = _point_loglik(spec, out, targets)
    grad = np.zeros_like(theta)
    gv = _views(spec, grad)
    p = _views(spec, theta)

    if spec.kind == "nalu":
        gv["w"][:] = prep.feats.T @ (g[:, 0] * out[:, 0])
        return float(ll.sum()), grad
    if spec.kind == "linear":
        gv["w"][:] = prep.feats.T @ g
        return float(ll.sum()), grad

    names = _dense_names(spec)
    dense_tape = tape[1:] if spec.kind == "cnn" else tape
    delta = g
    for i in range(len(names) - 1, -1, -1):
        wn, bn = names[i]
        h, _ = dense_tape[i]
        gv[wn][:] = h.T @ delta
        gv[bn][:] = delta.sum(axis=0)
        dh = delta @ p[wn].T
        if i > 0:
            _, zprev = dense_tape[i - 1]
            delta = dh * _act_grad(spec, zprev)
        else:
            delta = dh
    if spec.kind == "cnn":
        z = tape[0]
        da = delta.reshape((prep.n,) + spec.pooled_hw + (spec.filters,))
        if spec.pool:
            da = _unpool(da, z.shape)
        dz = (da * _act_grad(spec, z)).reshape(-1, spec.filters)
        gv["W1"][:] = (prep.feats.T @ dz).reshape(gv["W1"].shape)
        gv["b1"][:] = dz.sum(axis=0)
    return float(ll.sum()), grad


def grad_log_posterior(spec: ModelSpec, prior, params, data=None, temperature: float = 1.0) -> np.ndarray:
    """Gradient of ``(log p(D|w) + log p(w)) / T``; ``data=None`` means prior only."""
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    theta = _theta(params)
    _, grad = prior.logpdf_grad(theta)
    if data is not None:
        _, g = loglik_and_grad(spec, theta, prepare(spec, data.inputs), data.targets)
        grad = grad + g
    return grad / temperature


def init_uniform(spec: ModelSpec, bound: float, rng) -> ParamVector:
    from .numkit import rng_of

    return ParamVector(rng_of(rng).uniform(-bound, bound, spec.n_params), spec.layout())
