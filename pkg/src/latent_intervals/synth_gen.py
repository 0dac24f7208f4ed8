"""Synthetic disentangled generator, corruption models and dataset sampling.

The generator renders a soft-edged disc over a horizontally striped
background. Every latent coordinate drives exactly one visual factor, so the
"true" latent of every image is known exactly and disentanglement holds by
construction.

Latent layout (0-based index -> factor)::

    0 center_x        3 disc_intensity   6 stripe_phase
    1 center_y        4 background       7 stripe_contrast
    2 radius          5 edge_softness

Coordinates beyond index 7 (when ``dim > 8``) do not affect the image.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels_py, kernels
from .errors import FormatError

FACTOR_NAMES = (
    "center_x",
    "center_y",
    "radius",
    "disc_intensity",
    "background",
    "edge_softness",
    "stripe_phase",
    "stripe_contrast",
)
N_FACTORS = len(FACTOR_NAMES)

DOWNSAMPLE_FACTORS = (1, 4, 8, 16, 32)
MASK_THRESHOLDS = {"easy": 0.3, "medium": 0.6, "hard": 0.9}
CORRUPTION_KINDS = ("none", "downsample", "mask")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class Generator:
    """Deterministic procedural renderer ``G: R^dim -> [0, 1]^(H x W x 1)``."""

    dim: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.height < 4 or self.width < 4:
            raise ValueError("height and width must be at least 4")
        if self.channels != 1:
            raise ValueError("only single-channel rendering is supported")

    @property
    def shape(self):
        return (self.height, self.width, self.channels)

    def factor_ranges(self):
        """(low, high) of each factor's value range, in pixel or intensity units."""
        h, w = self.height, self.width
        s = min(h, w)
        return np.array(
            [
                (0.25 * w, 0.75 * w),
                (0.25 * h, 0.75 * h),
                (0.10 * s, 0.30 * s),
                (0.4, 1.0),
                (0.2, 0.5),
                (0.5 * s / 32.0, 3.0 * s / 32.0),
                (0.0, np.pi),
                (0.0, 0.2),
            ]
        )

    def factors(self, z):
        """Map raw latents ``(..., dim)`` to factor values ``(..., 8)``.

        Each raw coordinate is squashed through a sigmoid into its factor's
        range; factors without a latent coordinate sit at their midpoint.
        """
        z = self._check(z)
        k = min(self.dim, N_FACTORS)
        s = np.full(z.shape[:-1] + (N_FACTORS,), 0.5)
        s[..., :k] = _sigmoid(z[..., :k])
        rng = self.factor_ranges()
        return rng[:, 0] + (rng[:, 1] - rng[:, 0]) * s

    def _check(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 0 or z.shape[-1] != self.dim:
            raise ValueError(
                f"latent must have trailing dimension {self.dim}, got shape {z.shape}"
            )
        if not np.all(np.isfinite(z)):
            raise ValueError("latent contains non-finite values")
        return z

    def _squash_slope(self, z):
        # d value / d z for the coordinates that drive a factor
        k = min(self.dim, N_FACTORS)
        rng = self.factor_ranges()
        s = _sigmoid(z[:, :k])
        return (rng[:k, 1] - rng[:k, 0]) * s * (1.0 - s)

    def render(self, z):
        """Render ``(..., dim)`` latents to images of shape ``(..., H, W, 1)``."""
        v = self.factors(z)
        batch = v.shape[:-1]
        img = kernels.render(v.reshape(-1, N_FACTORS), self.height, self.width)
        return img.reshape(batch + (self.height, self.width, 1))

    def render_with_jacobian(self, z):
        """Render a batch ``(B, dim)`` and return ``(images, jac)``.

        ``jac`` has shape ``(B, dim, H, W, 1)`` and holds d pixel / d z.
        The disc profile is a clamped smoothstep, so the map is C1 and the
        clamp endpoints contribute zero slope.
        """
        z = self._check(z)
        if z.ndim != 2:
            raise ValueError("render_with_jacobian expects a (B, dim) batch")
        img, d_val = _kernels_py.render_jacobian(self.factors(z), self.height, self.width)
        k = min(self.dim, N_FACTORS)
        jac = np.zeros((len(z), self.dim, self.height, self.width))
        jac[:, :k] = d_val[:, :k] * self._squash_slope(z)[:, :, None, None]
        return img[..., None], jac[..., None]

    def recon_vjp(self, z, target):
        """Mean absolute pixel error of ``render(z)`` against ``target`` and
        its gradient with respect to ``z``: ``(loss (B,), grad (B, dim))``."""
        z = self._check(z)
        target = np.asarray(target, dtype=np.float64).reshape(len(z), self.height, self.width)
        loss, d_val = kernels.render_vjp(self.factors(z), target)
        k = min(self.dim, N_FACTORS)
        grad = np.zeros_like(z)
        grad[:, :k] = d_val[:, :k] * self._squash_slope(z)
        return loss, grad


# ---------------------------------------------------------------------------
# Latent sampling and corruption models
# ---------------------------------------------------------------------------


def sample_latent(rng, dim=8):
    """Draw ``dim`` independent standard-normal latent coordinates."""
    return rng.standard_normal(dim)


@dataclass(frozen=True)
class CorruptionSpec:
    """One concrete corruption: ``none``, ``downsample`` by an integer factor,
    or ``mask`` with a per-pixel threshold."""

    kind: str = "none"
    downsample_factor: int = 1
    mask_threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ValueError("mask_threshold must lie in [0, 1]")

    @property
    def parameter(self):
        if self.kind == "downsample":
            return float(self.downsample_factor)
        if self.kind == "mask":
            return float(self.mask_threshold)
        return 0.0

    def label(self):
        if self.kind == "downsample":
            return f"{self.downsample_factor}x"
        if self.kind == "mask":
            return f"mask{self.mask_threshold:g}"
        return "clean"


@dataclass(frozen=True)
class CorruptionPolicy:
    """How a corruption level is drawn per sample.

    ``kind = "downsample"`` picks a factor uniformly from ``factors``;
    ``kind = "mask"`` picks a threshold uniformly from ``thresholds``.
    """

    kind: str = "downsample"
    factors: tuple = DOWNSAMPLE_FACTORS
    thresholds: tuple = tuple(MASK_THRESHOLDS.values())

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.kind == "downsample" and not self.factors:
            raise ValueError("downsample policy needs at least one factor")
        if self.kind == "mask" and not self.thresholds:
            raise ValueError("mask policy needs at least one threshold")
        for t in self.thresholds:
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"mask threshold {t} outside [0, 1]")

    def input_channels(self, channels=1):
        return channels + 1 if self.kind == "mask" else channels

    def draw(self, rng):
        if self.kind == "downsample":
            return CorruptionSpec("downsample", downsample_factor=int(rng.choice(self.factors)))
        if self.kind == "mask":
            return CorruptionSpec("mask", mask_threshold=float(rng.choice(self.thresholds)))
        return CorruptionSpec("none")

    def to_json(self):
        return json.dumps(
            {"kind": self.kind, "factors": list(self.factors), "thresholds": list(self.thresholds)},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["kind"], tuple(int(f) for f in d["factors"]), tuple(float(t) for t in d["thresholds"]))


def corrupt_downsample(y, factor):
    """Block-mean pool by ``factor`` then nearest-neighbour upsample to the
    original size. ``factor = 1`` returns an exact copy."""
    y = np.asarray(y)
    h, w, c = y.shape
    factor = int(factor)
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"downsample factor {factor} does not divide {h}x{w}")
    if factor == 1:
        return y.copy()
    blocks = y.astype(np.float64).reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
    up = np.repeat(np.repeat(blocks, factor, axis=0), factor, axis=1)
    return up.astype(y.dtype, copy=False)


def corrupt_mask(y, threshold, rng):
    """Zero the pixels where a uniform noise field falls below ``threshold``.

    Returns ``(masked_image, mask)`` with ``mask`` of shape ``(H, W, 1)``
    holding 1.0 at masked pixels.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"mask threshold {threshold} outside [0, 1]")
    y = np.asarray(y)
    h, w = y.shape[:2]
    hit = rng.random((h, w)) < threshold
    masked = np.where(hit[..., None], 0.0, y).astype(y.dtype, copy=False)
    return masked, hit[..., None].astype(y.dtype)


def apply_corruption(y, spec, rng):
    """Corrupt a clean render into an encoder input (mask appended as a channel)."""
    if spec.kind == "downsample":
        return corrupt_downsample(y, spec.downsample_factor)
    if spec.kind == "mask":
        masked, mask = corrupt_mask(y, spec.mask_threshold, rng)
        return np.concatenate([masked, mask], axis=-1)
    return np.array(y, copy=True)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

_KIND_CODE = {k: i for i, k in enumerate(CORRUPTION_KINDS)}


@dataclass
class Sample:
    x: np.ndarray
    z: np.ndarray
    corruption: CorruptionSpec


@dataclass
class Dataset:
    """Column-oriented batch of samples.

    ``x`` is ``(n, H, W, Cx)`` float32, ``z`` is ``(n, dim)`` float32.
    ``kinds``/``params`` record each sample's corruption.
    """

    x: np.ndarray
    z: np.ndarray
    kinds: np.ndarray
    params: np.ndarray

    def __len__(self):
        return len(self.z)

    def __getitem__(self, i):
        kind = CORRUPTION_KINDS[int(self.kinds[i])]
        p = float(self.params[i])
        if kind == "downsample":
            spec = CorruptionSpec(kind, downsample_factor=int(round(p)))
        elif kind == "mask":
            spec = CorruptionSpec(kind, mask_threshold=p)
        else:
            spec = CorruptionSpec(kind)
        return Sample(self.x[i], self.z[i], spec)

    def subset(self, idx):
        return Dataset(self.x[idx], self.z[idx], self.kinds[idx], self.params[idx])

    @classmethod
    def concat(cls, parts):
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.z for p in parts]),
            np.concatenate([p.kinds for p in parts]),
            np.concatenate([p.params for p in parts]),
        )


@dataclass
class DatasetSplit:
    train: Dataset
    calibration: Dataset
    validation: Dataset
    generator: Generator = field(default_factory=Generator)
    policy: CorruptionPolicy = field(default_factory=CorruptionPolicy)
    seed: int = 0

    @property
    def sizes(self):
        return (len(self.train), len(self.calibration), len(self.validation))


def split_sizes(n, ratios=(0.8, 0.1, 0.1)):
    n_train = int(np.floor(ratios[0] * n + 1e-9))
    n_cal = int(np.floor(ratios[1] * n + 1e-9))
    return n_train, n_cal, n - n_train - n_cal


def substream(seed, *key):
    """Independent generator for a named substream of the master seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


# substream prefixes: keep pools drawn for different purposes disjoint
STREAM_DATASET = 0
STREAM_POOL = 1
STREAM_ADAPTIVITY = 2
STREAM_TRAIN = 3
STREAM_COVERAGE = 4


def make_samples(n, generator, policy, seed, stream=STREAM_POOL, specs=None):
    """Draw ``n`` fresh ``(x, z)`` samples.

    Sample ``i`` uses its own substream ``(stream, i)`` of ``seed``, so the
    output does not depend on batching. ``specs`` (one per sample) overrides
    the policy's per-sample corruption draw.
    """
    n = int(n)
    dim = generator.dim
    z = np.empty((n, dim))
    rngs = []
    chosen = []
    for i in range(n):
        rng = substream(seed, stream, i)
        z[i] = sample_latent(rng, dim)
        drawn = policy.draw(rng)
        chosen.append(specs[i] if specs is not None else drawn)
        rngs.append(rng)
    z = z.astype(np.float32)
    cx = policy.input_channels(generator.channels)
    x = np.empty((n, generator.height, generator.width, cx), dtype=np.float32)
    chunk = 1024
    for start in range(0, n, chunk):
        ys = generator.render(z[start:start + chunk].astype(np.float64))
        for j, y in enumerate(ys):
            i = start + j
            xi = apply_corruption(y, chosen[i], rngs[i])
            if xi.shape[-1] != cx:
                raise ValueError("corruption kind does not match the policy's channel layout")
            x[i] = xi
    kinds = np.array([_KIND_CODE[s.kind] for s in chosen], dtype=np.uint8)
    params = np.array([s.parameter for s in chosen], dtype=np.float32)
    return Dataset(x, z, kinds, params)


def make_dataset(n, generator=None, policy=None, seed=0, ratios=(0.8, 0.1, 0.1)):
    """Generate ``n`` samples and split them train/calibration/validation."""
    if n < 10:
        raise ValueError(f"dataset needs at least 10 samples, got {n}")
    generator = generator or Generator()
    policy = policy or CorruptionPolicy()
    data = make_samples(n, generator, policy, seed, stream=STREAM_DATASET)
    a, b, _ = split_sizes(n, ratios)
    idx = np.arange(n)
    return DatasetSplit(
        data.subset(idx[:a]),
        data.subset(idx[a:a + b]),
        data.subset(idx[a + b:]),
        generator=generator,
        policy=policy,
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"LISYNDS\x00"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIIIIIQI")


def save_dataset(split, path, sidecar=True):
    """Write a split to ``path`` (binary) and optionally ``path.csv``.

    Layout: header, then ``n*dim`` latents, then ``n*H*W*Cx`` pixels, all
    little-endian float32, samples ordered train, calibration, validation.
    """
    path = Path(path)
    data = Dataset.concat([split.train, split.calibration, split.validation])
    g = split.generator
    n, cx = len(data), data.x.shape[-1]
    policy = split.policy.to_json().encode("utf-8")
    header = _HEADER.pack(
        DATASET_MAGIC, DATASET_VERSION, g.dim, g.height, g.width, g.channels, cx,
        n, *split.sizes, split.seed, len(policy),
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(policy)
        f.write(np.ascontiguousarray(data.z, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(data.x, dtype="<f4").tobytes())
    if sidecar:
        with open(str(path) + ".csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["index", "split", "corruption", "parameter"])
            names = ["train"] * split.sizes[0] + ["calibration"] * split.sizes[1] + ["validation"] * split.sizes[2]
            for i in range(n):
                w.writerow([i, names[i], CORRUPTION_KINDS[data.kinds[i]], f"{float(data.params[i]):g}"])
    return path


def load_dataset(path):
    """Inverse of :func:`save_dataset`; reads the CSV sidecar when present."""
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: truncated dataset header")
        magic, version, dim, h, w, c, cx, n, n_tr, n_cal, n_val, seed, plen = _HEADER.unpack(raw)
        if magic != DATASET_MAGIC:
            raise FormatError(f"{path}: not a dataset file (bad magic)")
        if version != DATASET_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        if n_tr + n_cal + n_val != n:
            raise FormatError(f"{path}: split sizes do not sum to n")
        try:
            policy = CorruptionPolicy.from_json(f.read(plen).decode("utf-8"))
            generator = Generator(dim, h, w, c)
        except (ValueError, KeyError, UnicodeDecodeError) as e:
            raise FormatError(f"{path}: bad dataset header ({e})") from e
        z = np.frombuffer(f.read(4 * n * dim), dtype="<f4")
        x = np.frombuffer(f.read(4 * n * h * w * cx), dtype="<f4")
        if z.size != n * dim or x.size != n * h * w * cx or f.read(1):
            raise FormatError(f"{path}: payload size does not match header")
    z = z.reshape(n, dim).astype(np.float32)
    x = x.reshape(n, h, w, cx).astype(np.float32)
    kinds = np.full(n, _KIND_CODE[policy.kind], dtype=np.uint8)
    params = np.zeros(n, dtype=np.float32)
    side = Path(str(path) + ".csv")
    if side.exists():
        with open(side, newline="") as f:
            rows = list(csv.DictReader(f))
        if len(rows) == n:
            kinds = np.array([_KIND_CODE[r["corruption"]] for r in rows], dtype=np.uint8)
            params = np.array([float(r["parameter"]) for r in rows], dtype=np.float32)
    data = Dataset(x, z, kinds, params)
    idx = np.arange(n)
    return DatasetSplit(
        data.subset(idx[:n_tr]),
        data.subset(idx[n_tr:n_tr + n_cal]),
        data.subset(idx[n_tr + n_cal:]),
        generator=generator,
        policy=policy,
        seed=int(seed),
    )
