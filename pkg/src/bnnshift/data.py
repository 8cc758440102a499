"""Synthetic datasets with planted dependencies, corruptions, patches and IDX files."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .models import LabeledDataset, im2col
from .numkit import ConfigError, ShapeError, rng_of

# shift of the input mean, in train-feature standard deviations, reported for
# the two non-zero-mean MNIST-C corruptions (brightness, fog)
BRIGHTNESS_SHIFT = 1.44
FOG_SHIFT = 0.89


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class DependenceSpec:
    """A dependence planted in every training input.

    kinds: ``none``, ``dead_feature`` (``index``), ``affine`` (``c``, ``c0``;
    ``c`` may hold several constraint rows), ``patch_affine`` (``gamma`` of
    shape (K, K, C), ``gamma0``), ``multiplicative`` (``p``) and ``spurious``
    (``index``, ``value``: the feature equals ``value`` on class 1, 0 otherwise).
    Affine rows are normalised so ``|c|^2 + c0^2 = 1``; ``p`` to unit norm.
    """

    kind: str = "none"
    index: int = 0
    c: tuple = ()
    c0: tuple = ()
    gamma: tuple = ()
    gamma0: float = 0.0
    p: tuple = ()
    value: float = 1.0

    def __post_init__(self):
        kinds = ("none", "dead_feature", "affine", "patch_affine", "multiplicative", "spurious")
        if self.kind not in kinds:
            raise ConfigError(f"unknown dependence kind {self.kind!r}")
        if self.kind == "affine":
            c = np.atleast_2d(np.asarray(self.c, dtype=np.float64))
            c0 = np.broadcast_to(np.asarray(self.c0, dtype=np.float64), (len(c),)).copy()
            norm = np.sqrt((c * c).sum(axis=1) + c0 * c0)
            if np.any(norm == 0):
                raise ConfigError("affine constraint rows must be non-zero")
            object.__setattr__(self, "c", (c / norm[:, None]).tolist())
            object.__setattr__(self, "c0", (c0 / norm).tolist())
        if self.kind == "patch_affine":
            g = np.asarray(self.gamma, dtype=np.float64)
            if g.ndim == 2:
                g = g[..., None]
            if g.ndim != 3 or g.shape[0] != g.shape[1]:
                raise ConfigError("gamma must have shape (K, K, C)")
            norm = np.sqrt((g * g).sum() + self.gamma0**2)
            object.__setattr__(self, "gamma", (g / norm).tolist())
            object.__setattr__(self, "gamma0", float(self.gamma0 / norm))
        if self.kind == "multiplicative":
            p = np.asarray(self.p, dtype=np.float64)
            object.__setattr__(self, "p", (p / np.linalg.norm(p)).tolist())

    @property
    def c_matrix(self) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.c, dtype=np.float64))

    @property
    def c0_vector(self) -> np.ndarray:
        return np.asarray(self.c0, dtype=np.float64).reshape(-1)

    @property
    def gamma_array(self) -> np.ndarray:
        return np.asarray(self.gamma, dtype=np.float64)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class CorruptionSpec:
    """kinds: ``gaussian_noise`` (sigma), ``constant_shift`` (shift),
    ``pca_noise`` (sigma, components, basis), ``translate`` (dx, dy),
    ``feature_activate`` (index, value)."""

    kind: str
    sigma: float = 0.0
    shift: float = 0.0
    components: tuple = (0, 0)
    basis: object = field(default=None, compare=False, repr=False)
    dx: int = 0
    dy: int = 0
    index: int = 0
    value: float = 0.0

    def __post_init__(self):
        kinds = ("gaussian_noise", "constant_shift", "pca_noise", "translate", "feature_activate")
        if self.kind not in kinds:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        for name in ("sigma", "shift", "value"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"corruption {name} must be finite")
        if self.kind == "pca_noise" and self.basis is None:
            raise ConfigError("pca_noise needs a reference basis")

    @property
    def tag(self) -> str:
        if self.kind == "gaussian_noise":
            return f"gaussian_noise(sigma={self.sigma:g})"
        if self.kind == "constant_shift":
            return f"constant_shift(c={self.shift:g})"
        if self.kind == "pca_noise":
            return f"pca_noise(sigma={self.sigma:g},components={self.components[0]}:{self.components[1]})"
        if self.kind == "translate":
            return f"translate(dx={self.dx},dy={self.dy})"
        return f"feature_activate(index={self.index},value={self.value:g})"

    def scaled(self, magnitude: float) -> "CorruptionSpec":
        """Copy with its magnitude parameter replaced."""
        from dataclasses import replace

        if self.kind in ("gaussian_noise", "pca_noise"):
            return replace(self, sigma=float(magnitude))
        if self.kind == "constant_shift":
            return replace(self, shift=float(magnitude))
        if self.kind == "feature_activate":
            return replace(self, value=float(magnitude))
        return replace(self, dx=int(magnitude))


# ---------------------------------------------------------------------------
# generators


def _project_affine(x, c, c0):
    """Closest points to ``x`` with ``x @ c.T == c0``."""
    resid = x @ c.T - c0
    return x - resid @ np.linalg.solve(c @ c.T, c)


def _teacher_labels(scores, gen, n_classes, margin, sharpness):
    """Logistic teacher on standardised scores; returns labels and a keep-mask."""
    if n_classes == 2:
        s = scores[:, 0]
        keep = np.abs(s) >= margin
        prob = 1.0 / (1.0 + np.exp(-sharpness * s))
        y = (gen.random(len(s)) < prob).astype(np.int64)
        return y, keep
    top2 = np.sort(scores, axis=1)[:, -2:]
    keep = top2[:, 1] - top2[:, 0] >= margin
    logits = sharpness * scores
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    u = gen.random(len(p))[:, None]
    y = (u > np.cumsum(p, axis=1)).sum(axis=1)
    return np.minimum(y, n_classes - 1), keep


def _orthogonal_directions(gen, m, k, avoid):
    """``k`` random unit directions orthogonal to the columns of ``avoid``."""
    d = gen.standard_normal((m, k))
    if avoid is not None and avoid.size:
        q, _ = np.linalg.qr(avoid)
        d -= q @ (q.T @ d)
    return d / np.linalg.norm(d, axis=0)


def _patch_constraints(shape, gamma, gamma0):
    """Rows ``A`` and targets ``b`` with ``A @ flat(image) == b`` for every valid patch."""
    h, w, c = shape
    k = gamma.shape[0]
    oh, ow = h - k + 1, w - k + 1
    if oh < 1 or ow < 1:
        raise ConfigError(f"kernel {k} larger than image {h}x{w}")
    rows = []
    for i in range(oh):
        for j in range(ow):
            a = np.zeros((h, w, c))
            a[i : i + k, j : j + k, :] = gamma
            rows.append(a.ravel())
    return np.array(rows), np.full(oh * ow, gamma0)


def gen_planted(
    spec: DependenceSpec,
    n: int,
    shape,
    rng,
    n_classes: int = 2,
    task: str = "classify",
    scales=None,
    teacher=None,
    margin: float = 0.25,
    sharpness: float = 20.0,
    noise_var: float = 0.01,
) -> LabeledDataset:
    """Draw ``n`` inputs that satisfy ``spec`` exactly, labelled by a teacher.

    ``shape`` is ``m`` for flat inputs or ``(H, W, C)`` for images. Inputs
    start as ``N(0, diag(scales^2))`` before the dependence is imposed. The
    classification teacher looks along random directions orthogonal to the
    planted one and drops points within ``margin`` of its decision boundary.
    For ``task="regress"`` targets are ``x @ teacher`` (or the product unit for
    multiplicative data) plus ``N(0, noise_var)``.
    """
    if n < 2:
        raise ConfigError("need n >= 2")
    gen = rng_of(rng)
    shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(s) for s in shape)
    image = len(shape) == 3
    m = int(np.prod(shape))
    scales = np.ones(m) if scales is None else np.broadcast_to(np.asarray(scales, dtype=np.float64), (m,))

    avoid = None
    if spec.kind in ("dead_feature", "spurious"):
        if not 0 <= spec.index < m:
            raise ConfigError(f"feature index {spec.index} out of range for {m} features")
        avoid = np.eye(m)[:, [spec.index]]
    elif spec.kind == "affine":
        cm = spec.c_matrix
        if cm.shape[1] != m or len(cm) >= m:
            raise ConfigError(f"affine constraints of shape {cm.shape} do not fit {m} features")
        avoid = cm.T
    elif spec.kind == "multiplicative":
        p = np.asarray(spec.p)
        if p.size != m:
            raise ConfigError(f"multiplicative p has {p.size} entries, inputs have {m}")
        avoid = p[:, None]
    elif spec.kind == "patch_affine":
        if not image:
            raise ConfigError("patch_affine needs image-shaped inputs")
        g = spec.gamma_array
        if g.shape[2] != shape[2]:
            raise ConfigError("gamma channel count does not match images")
        a_mat, b_vec = _patch_constraints(shape, g, spec.gamma0)
        x_part = np.linalg.lstsq(a_mat, b_vec, rcond=None)[0]
        _, sv, vt = np.linalg.svd(a_mat)
        rank = int((sv > 1e-10 * sv[0]).sum())
        null = vt[rank:].T
        avoid = None

    if teacher is None:
        if spec.kind == "patch_affine":
            teacher = null @ _orthogonal_directions(gen, null.shape[1], n_classes if n_classes > 2 else 1, None)
        else:
            teacher = _orthogonal_directions(gen, m, n_classes if n_classes > 2 else 1, avoid)
    teacher = np.asarray(teacher, dtype=np.float64).reshape(m, -1)
    # teacher scores are zero-mean by construction; scale them analytically so
    # every split drawn from the same spec shares one decision rule
    if spec.kind == "patch_affine":
        score_std = np.linalg.norm((null.T @ teacher) * scales[: null.shape[1], None], axis=0)
    else:
        score_std = np.linalg.norm(teacher * scales[:, None], axis=0)

    xs, ys = [], []
    have = 0
    while have < n:
        batch = max(2 * (n - have), 64)
        if spec.kind == "patch_affine":
            z = gen.standard_normal((batch, null.shape[1])) * scales[: null.shape[1]]
            x = x_part + z @ null.T
        elif spec.kind == "multiplicative":
            logx = gen.standard_normal((batch, m)) * scales
            p = np.asarray(spec.p)
            logx -= np.outer(logx @ p, p)
            x = np.exp(logx)
        else:
            x = gen.standard_normal((batch, m)) * scales
            if spec.kind == "dead_feature":
                x[:, spec.index] = 0.0
            elif spec.kind == "affine":
                x = _project_affine(x, spec.c_matrix, spec.c0_vector)
        if task == "regress":
            f = np.exp(np.log(x) @ teacher) if spec.kind == "multiplicative" else x @ teacher
            y = f + np.sqrt(noise_var) * gen.standard_normal(f.shape)
            keep = np.ones(len(x), dtype=bool)
        else:
            feats = np.log(x) if spec.kind == "multiplicative" else x
            y, keep = _teacher_labels(feats @ teacher / score_std, gen, n_classes, margin, sharpness)
        if spec.kind == "spurious":
            x[:, spec.index] = np.where(y == 1, spec.value, 0.0)
        xs.append(x[keep])
        ys.append(y[keep])
        have += int(keep.sum())
    x = np.concatenate(xs)[:n]
    y = np.concatenate(ys)[:n]
    if image:
        x = x.reshape((n,) + shape)
    meta = {"dependence": spec.to_dict(), "teacher": teacher, "task": task}
    return LabeledDataset(x, y, meta)


def split_dataset(data: LabeledDataset, n_first: int):
    """Split into the first ``n_first`` points and the rest (e.g. train / test)."""
    a = LabeledDataset(data.inputs[:n_first], data.targets[:n_first], dict(data.meta))
    b = LabeledDataset(data.inputs[n_first:], data.targets[n_first:], dict(data.meta))
    return a, b


def flip_spurious(data: LabeledDataset, index: int, value: float) -> LabeledDataset:
    """Test-time flip of a planted spurious feature: active on class 0, silent on class 1."""
    x = data.inputs.copy()
    x[:, index] = np.where(data.targets == 1, 0.0, value)
    return data.with_inputs(x, corruption="spurious_flip")


# ---------------------------------------------------------------------------
# corruptions


def corrupt(data: LabeledDataset, spec: CorruptionSpec, rng) -> LabeledDataset:
    """Apply a covariate shift; targets are never touched."""
    x = data.inputs.copy()
    # deterministic corruptions accept rng=None
    gen = rng_of(rng) if spec.kind in ("gaussian_noise", "pca_noise") else None
    if spec.kind == "gaussian_noise":
        x = x + spec.sigma * gen.standard_normal(x.shape)
    elif spec.kind == "constant_shift":
        x = x + spec.shift
    elif spec.kind == "pca_noise":
        comps = spec.basis.components[:, spec.components[0] : spec.components[1]]
        flat = x.reshape(len(x), -1)
        if flat.shape[1] != comps.shape[0]:
            raise ShapeError(f"basis of dim {comps.shape[0]} does not match inputs with {flat.shape[1]} features")
        noise = spec.sigma * gen.standard_normal((len(x), comps.shape[1])) @ comps.T
        x = (flat + noise).reshape(x.shape)
    elif spec.kind == "translate":
        if x.ndim != 4:
            raise ConfigError("translate needs image-shaped inputs (n, H, W, C)")
        x = _shift(_shift(x, spec.dy, 1), spec.dx, 2)
    else:
        flat = x.reshape(len(x), -1)
        flat[:, spec.index] = spec.value
        x = flat.reshape(x.shape)
    return LabeledDataset(x, data.targets.copy(), {**data.meta, "corruption": spec.tag})


def _shift(x, k, axis):
    """Integer roll along ``axis`` with zero fill."""
    if k == 0:
        return x
    out = np.zeros_like(x)
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    if k > 0:
        src[axis], dst[axis] = slice(0, -k), slice(k, None)
    else:
        src[axis], dst[axis] = slice(-k, None), slice(0, k)
    out[tuple(dst)] = x[tuple(src)]
    return out


def extract_patches(images, k: int, padding: bool = False) -> np.ndarray:
    """All K x K x C patches as rows, ordered by (image, y, x)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise ShapeError(f"images must be (n, H, W, C), got {images.shape}")
    pad = 2 * (k // 2) if padding else 0
    if k > images.shape[1] + pad or k > images.shape[2] + pad:
        raise ConfigError(f"kernel {k} larger than padded image {images.shape[1:3]}")
    return im2col(images, k, padding)


def flatten(data: LabeledDataset) -> LabeledDataset:
    return data.with_inputs(data.inputs.reshape(len(data), -1))


# ---------------------------------------------------------------------------
# IDX


class FormatError(io.FormatError):
    pass


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated magic at byte {len(raw)}")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise FormatError(f"{path}: bad magic {raw[:4].hex()} at byte 0")
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    ndim = raw[3]
    hdr_end = 4 + 4 * ndim
    if len(raw) < hdr_end:
        raise FormatError(f"{path}: truncated dimension header at byte {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:hdr_end])
    count = int(np.prod(dims)) if ndim else 1
    need = hdr_end + count * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated data at byte {len(raw)}, expected {need} bytes")
    if len(raw) > need:
        raise FormatError(f"{path}: trailing bytes after offset {need}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=hdr_end).reshape(dims)


def load_idx(images_path, labels_path, stats=None) -> LabeledDataset:
    """Images scaled to [0, 1] then standardised per pixel.

    ``stats`` is the ``(mean, std)`` pair of a training set; when omitted the
    statistics of this file are used (i.e. this file is the training split).
    """
    imgs = read_idx(images_path)
    labels = read_idx(labels_path)
    if imgs.ndim < 2 or labels.ndim != 1:
        raise FormatError(f"{images_path}: expected image tensor and label vector")
    if len(imgs) != len(labels):
        raise FormatError(f"{labels_path}: {len(labels)} labels for {len(imgs)} images at byte 4")
    x = imgs.astype(np.float64)
    if imgs.dtype == np.dtype(">u1"):
        x /= 255.0
    if x.ndim == 3:
        x = x[..., None]
    if stats is None:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    std = np.where(std > 0, std, 1.0)
    x = (x - mean) / std
    return LabeledDataset(x, labels.astype(np.int64), {"source": str(images_path), "stats": (mean, std)})


def write_idx(path, array) -> None:
    """Write an unsigned-byte IDX file (used for fixtures)."""
    a = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, a.ndim]))
        fh.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        fh.write(a.tobytes())


# ---------------------------------------------------------------------------
# dataset cache


def save_dataset(data: LabeledDataset, prefix) -> None:
    """``<prefix>.bin`` holds inputs then targets as float64; ``<prefix>.json`` describes them."""
    prefix = str(prefix)
    header = {"input_shape": list(data.inputs.shape), "target_shape": list(data.targets.shape)}
    io.write_sidecar(prefix + ".bin", b"BNNDAT01", header, [data.inputs, data.targets.astype(np.float64)])
    desc = {**header, "target_dtype": str(data.targets.dtype), "meta": data.meta}
    io.write_json(prefix + ".json", desc)


def load_dataset(prefix) -> LabeledDataset:
    prefix = str(prefix)
    h, body = io.read_sidecar(prefix + ".bin", b"BNNDAT01")
    desc = json.loads(Path(prefix + ".json").read_text(encoding="utf-8"))
    ni = int(np.prod(h["input_shape"]))
    nt = int(np.prod(h["target_shape"]))
    if body.size != ni + nt:
        raise FormatError(f"{prefix}.bin: expected {ni + nt} floats, found {body.size}")
    x = body[:ni].reshape(h["input_shape"])
    y = body[ni:].reshape(h["target_shape"]).astype(desc["target_dtype"])
    return LabeledDataset(x, y, desc["meta"])
