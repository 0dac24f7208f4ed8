"""Quantile encoder: a fully connected trunk with point / lower / upper heads.

Everything here is plain numpy with hand-written backpropagation. At the
non-differentiable points of the L1, pinball, absolute-pixel and leaky
rectifier terms the right-hand branch is used, e.g. a tie ``z == q`` in the
pinball loss takes the ``(1 - beta)`` branch and a zero pre-activation
passes gradient with slope 1.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, TrainingError
from .synth_gen import STREAM_TRAIN, Generator, substream

HEADS = ("point", "lower", "upper")


@dataclass
class TrainConfig:
    alpha: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.01
    recon_weight: float = 10.0
    seed: int = 0
    hidden: tuple = (256, 128)
    leaky_slope: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.recon_weight < 0:
            raise ValueError("recon_weight must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class EncoderOutput:
    """Point prediction and raw quantile estimates, each ``(..., D)``.

    No ordering between the three is enforced.
    """

    point: np.ndarray
    q_lo: np.ndarray
    q_hi: np.ndarray

    def __len__(self):
        return len(self.point)

    def __getitem__(self, idx):
        return EncoderOutput(self.point[idx], self.q_lo[idx], self.q_hi[idx])


@dataclass
class EncoderParams:
    """Trunk layers ``[(W, b), ...]`` and one ``(W, b)`` per head."""

    trunk: list
    heads: dict
    leaky_slope: float = 0.01

    @property
    def input_size(self):
        return self.trunk[0][0].shape[0] if self.trunk else self.heads["point"][0].shape[0]

    @property
    def dim(self):
        return self.heads["point"][0].shape[1]

    def items(self):
        for i, (W, b) in enumerate(self.trunk):
            yield f"trunk{i}.W", W
            yield f"trunk{i}.b", b
        for h in HEADS:
            W, b = self.heads[h]
            yield f"{h}.W", W
            yield f"{h}.b", b

    def arrays(self):
        return [a for _, a in self.items()]

    def map(self, fn, *others):
        """New params with ``fn`` applied array-wise (zipped with ``others``)."""
        other_arrays = [o.arrays() for o in others]
        out = [fn(a, *(oa[i] for oa in other_arrays)) for i, a in enumerate(self.arrays())]
        return self._rebuild(out)

    def _rebuild(self, flat):
        it = iter(flat)
        trunk = [(next(it), next(it)) for _ in self.trunk]
        heads = {h: (next(it), next(it)) for h in HEADS}
        return EncoderParams(trunk, heads, self.leaky_slope)

    def copy(self):
        return self.map(np.copy)

    def n_params(self):
        return sum(a.size for a in self.arrays())


def init_params(input_size, dim, hidden=(256, 128), seed=0, leaky_slope=0.01):
    """He-style symmetric uniform weights (bound scaled by fan-in), zero biases."""
    rng = substream(seed, STREAM_TRAIN, 0)
    gain = np.sqrt(2.0 / (1.0 + leaky_slope**2))

    def layer(fan_in, fan_out):
        bound = gain * np.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

    widths = [int(input_size)] + [int(h) for h in hidden]
    trunk = [layer(a, b) for a, b in zip(widths[:-1], widths[1:])]
    heads = {h: layer(widths[-1], dim) for h in HEADS}
    return EncoderParams(trunk, heads, leaky_slope)


def zeros_like(params):
    return params.map(np.zeros_like)


def _flatten(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    # pixels in [0, 1] are fed to the trunk rescaled to [-1, 1]
    flat = 2.0 * x.reshape(1 if single else x.shape[0], -1) - 1.0
    if flat.shape[1] != params.input_size:
        raise ValueError(
            f"input has {flat.shape[1]} values per sample, encoder expects {params.input_size}"
        )
    return flat, single


def _trunk_forward(params, flat):
    acts = [flat]
    pres = []
    a = flat
    for W, b in params.trunk:
        pre = a @ W + b
        a = np.where(pre >= 0.0, pre, params.leaky_slope * pre)
        pres.append(pre)
        acts.append(a)
    if not np.all(np.isfinite(a)):
        raise NumericalError("non-finite activation in encoder trunk")
    return pres, acts


def forward(params, x):
    """Encode ``x`` (``(H, W, C)`` or ``(B, H, W, C)``) into an EncoderOutput."""
    flat, single = _flatten(params, x)
    _, acts = _trunk_forward(params, flat)
    h = acts[-1]
    outs = [h @ params.heads[k][0] + params.heads[k][1] for k in HEADS]
    if single:
        outs = [o[0] for o in outs]
    return EncoderOutput(*outs)


def predict(params, x, batch_size=2048):
    """Batched :func:`forward` over a large ``(n, H, W, C)`` array."""
    x = np.asarray(x)
    parts = [forward(params, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    if not parts:
        d = params.dim
        return EncoderOutput(np.empty((0, d)), np.empty((0, d)), np.empty((0, d)))
    return EncoderOutput(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("point", "q_lo", "q_hi")))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def pinball_loss(q, z, beta):
    """Quantile loss: ``(z - q) * beta`` if ``z > q`` else ``(q - z) * (1 - beta)``."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    q = np.asarray(q, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    out = np.where(z > q, (z - q) * beta, (q - z) * (1.0 - beta))
    return float(out) if out.ndim == 0 else out


def point_loss(pred, z):
    """L1 distance over the last axis."""
    pred = np.asarray(pred, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if pred.shape != z.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {z.shape}")
    out = np.abs(pred - z).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def recon_loss(g_pred, g_true):
    """Mean absolute pixel error over the trailing ``(H, W, C)`` axes."""
    a = np.asarray(g_pred, dtype=np.float64)
    b = np.asarray(g_true, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    out = np.abs(a - b).mean(axis=(-3, -2, -1))
    return float(out) if out.ndim == 0 else out


def full_mask(dim):
    return np.ones(dim, dtype=bool)


def check_mask(mask, dim):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (dim,):
        raise ValueError(f"dimension mask must have length {dim}")
    if not mask.any():
        raise ValueError("dimension mask selects no dimensions")
    return mask


def _batch_arrays(batch):
    x, z = batch
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None]
        x = np.asarray(x)[None]
    if len(z) == 0:
        raise ValueError("empty batch")
    return x, z


def loss_terms(params, batch, mask, cfg, generator=None):
    """Batch-mean of each loss component, as a dict.

    Keys: ``point``, ``recon`` (unweighted), ``pinball_lo``, ``pinball_hi``
    and ``total = point + c*recon + pinball_lo + pinball_hi``.
    """
    x, z = _batch_arrays(batch)
    mask = check_mask(mask, z.shape[1])
    out = forward(params, x)
    terms = {"point": float(point_loss(out.point, z).mean())}
    lo = pinball_loss(out.q_lo, z, cfg.alpha / 2) * mask
    hi = pinball_loss(out.q_hi, z, 1 - cfg.alpha / 2) * mask
    terms["pinball_lo"] = float(lo.sum(axis=1).mean())
    terms["pinball_hi"] = float(hi.sum(axis=1).mean())
    if cfg.recon_weight > 0:
        g = generator or Generator(dim=z.shape[1])
        terms["recon"] = float(recon_loss(g.render(out.point), g.render(z)).mean())
    else:
        terms["recon"] = 0.0
    terms["total"] = terms["point"] + cfg.recon_weight * terms["recon"] + terms["pinball_lo"] + terms["pinball_hi"]
    return terms


def total_loss(params, batch, mask, cfg, generator=None):
    return loss_terms(params, batch, mask, cfg, generator)["total"]


def _rsign(u):
    # right-hand derivative of |u|
    return np.where(u >= 0.0, 1.0, -1.0)


def _pinball_dq(q, z, beta):
    return np.where(z > q, -beta, 1.0 - beta)


def loss_and_grad(params, batch, mask, cfg, generator=None):
    """Return ``(loss_terms, gradient)`` with the gradient as EncoderParams."""
    x, z = _batch_arrays(batch)
    B, D = z.shape
    mask = check_mask(mask, D)
    flat, _ = _flatten(params, x)
    pres, acts = _trunk_forward(params, flat)
    h = acts[-1]
    f = h @ params.heads["point"][0] + params.heads["point"][1]
    lo = h @ params.heads["lower"][0] + params.heads["lower"][1]
    hi = h @ params.heads["upper"][0] + params.heads["upper"][1]
    a_lo, a_hi = cfg.alpha / 2, 1 - cfg.alpha / 2
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise NumericalError("non-finite encoder output")

    terms = {
        "point": float(np.abs(f - z).sum(axis=1).mean()),
        "pinball_lo": float((pinball_loss(lo, z, a_lo) * mask).sum(axis=1).mean()),
        "pinball_hi": float((pinball_loss(hi, z, a_hi) * mask).sum(axis=1).mean()),
        "recon": 0.0,
    }
    d_f = _rsign(f - z) / B
    if cfg.recon_weight > 0:
        g = generator or Generator(dim=D)
        rl, rg = g.recon_vjp(f, g.render(z))
        terms["recon"] = float(rl.mean())
        d_f = d_f + rg * (cfg.recon_weight / B)
    terms["total"] = terms["point"] + cfg.recon_weight * terms["recon"] + terms["pinball_lo"] + terms["pinball_hi"]
    if not np.isfinite(terms["total"]):
        raise NumericalError("non-finite loss")

    d_lo = _pinball_dq(lo, z, a_lo) * mask / B
    d_hi = _pinball_dq(hi, z, a_hi) * mask / B
    heads = {}
    dh = np.zeros_like(h)
    for name, d_out in (("point", d_f), ("lower", d_lo), ("upper", d_hi)):
        W, _ = params.heads[name]
        heads[name] = (h.T @ d_out, d_out.sum(axis=0))
        dh += d_out @ W.T

    trunk = [None] * len(params.trunk)
    for i in range(len(params.trunk) - 1, -1, -1):
        W, _ = params.trunk[i]
        d_pre = dh * np.where(pres[i] >= 0.0, 1.0, params.leaky_slope)
        trunk[i] = (acts[i].T @ d_pre, d_pre.sum(axis=0))
        if i > 0:
            dh = d_pre @ W.T
    return terms, EncoderParams(trunk, heads, params.leaky_slope)


def grad(params, batch, mask, cfg, generator=None):
    """Analytic gradient of :func:`total_loss` with respect to ``params``."""
    return loss_and_grad(params, batch, mask, cfg, generator)[1]


def kink_signature(params, batch, mask, cfg, generator=None):
    """Branch indicators of every piecewise term in the loss.

    Two parameter settings with equal signatures lie on the same smooth piece
    of the loss surface; used to pick non-kink points for gradient checks.
    """
    x, z = _batch_arrays(batch)
    flat, _ = _flatten(params, x)
    pres, acts = _trunk_forward(params, flat)
    h = acts[-1]
    out = [h @ params.heads[k][0] + params.heads[k][1] for k in HEADS]
    sig = [p >= 0.0 for p in pres]
    sig += [out[0] >= z, z > out[1], z > out[2]]
    if cfg.recon_weight > 0:
        g = generator or Generator(dim=z.shape[1])
        img = g.render(out[0])
        sig.append(img >= g.render(z))
        sig.append((img > 0.0) & (img < 1.0))
    return np.concatenate([s.ravel() for s in sig])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: EncoderParams
    init: EncoderParams
    trace: list = field(default_factory=list)


def _mean_terms(params, data, mask, cfg, generator, batch_size=512):
    keys = ("point", "pinball_lo", "pinball_hi", "recon")
    acc = dict.fromkeys(keys, 0.0)
    n = len(data.z)
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        t = loss_terms(params, (data.x[sl], data.z[sl]), mask, cfg, generator)
        w = len(data.z[sl]) / n
        for k in keys:
            acc[k] += w * t[k]
    acc["total"] = acc["point"] + cfg.recon_weight * acc["recon"] + acc["pinball_lo"] + acc["pinball_hi"]
    return acc


def train(data, mask, cfg, generator=None, params=None, log=None):
    """Minibatch gradient descent at the flat learning rate ``cfg.lr``.

    ``data`` is the training :class:`~.synth_gen.Dataset`. Epoch 0 of the
    returned trace is a full pass at the initial parameters; later rows are
    the running means over that epoch's minibatches.
    """
    n = len(data)
    if n == 0:
        raise ValueError("training split is empty")
    dim = data.z.shape[1]
    mask = check_mask(mask, dim)
    generator = generator or Generator(dim=dim)
    if params is None:
        params = init_params(data.x[0].size, dim, cfg.hidden, cfg.seed, cfg.leaky_slope)
    init = params.copy()
    params = params.copy()

    row = _mean_terms(params, data, mask, cfg, generator)
    trace = [dict(epoch=0, **row)]
    shuffle_rng = substream(cfg.seed, STREAM_TRAIN, 1)
    keys = ("point", "pinball_lo", "pinball_hi", "recon")
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        acc = dict.fromkeys(keys, 0.0)
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            try:
                terms, g = loss_and_grad(params, (data.x[idx], data.z[idx]), mask, cfg, generator)
            except NumericalError as e:
                raise TrainingError(str(e), epoch) from e
            w = len(idx) / n
            for k in keys:
                acc[k] += w * terms[k]
            params = params.map(lambda p, d: p - cfg.lr * d, g)
        acc["total"] = acc["point"] + cfg.recon_weight * acc["recon"] + acc["pinball_lo"] + acc["pinball_hi"]
        if not all(np.isfinite(v) for v in acc.values()) or not all(
            np.all(np.isfinite(a)) for a in params.arrays()
        ):
            raise TrainingError("training diverged", epoch)
        trace.append(dict(epoch=epoch, **acc))
        if log is not None:
            log(trace[-1])
    return TrainResult(params, init, trace)


def write_trace(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "point_loss", "pinball_lo", "pinball_hi", "recon", "total"])
        for r in trace:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in ("point", "pinball_lo", "pinball_hi", "recon", "total")])


def read_trace(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        dict(
            epoch=int(r["epoch"]),
            point=float(r["point_loss"]),
            pinball_lo=float(r["pinball_lo"]),
            pinball_hi=float(r["pinball_hi"]),
            recon=float(r["recon"]),
            total=float(r["total"]),
        )
        for r in rows
    ]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"LIQENC\x00\x00"
CHECKPOINT_VERSION = 1
_CK_HEADER = struct.Struct("<8sII")


def save_checkpoint(params, path, meta=None):
    """Header, JSON layer manifest, then little-endian float32 arrays in
    manifest order."""
    manifest = {
        "leaky_slope": params.leaky_slope,
        "n_trunk": len(params.trunk),
        "layers": [{"name": k, "shape": list(a.shape)} for k, a in params.items()],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for a in params.arrays():
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return Path(path)


def load_checkpoint(path):
    """Returns ``(params, meta)``; weights are widened back to float64."""
    with open(path, "rb") as f:
        raw = f.read(_CK_HEADER.size)
        if len(raw) < _CK_HEADER.size:
            raise FormatError(f"{path}: truncated checkpoint header")
        magic, version, mlen = _CK_HEADER.unpack(raw)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file (bad magic)")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        try:
            manifest = json.loads(f.read(mlen).decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as e:
            raise FormatError(f"{path}: bad checkpoint manifest") from e
        arrays = []
        for layer in manifest["layers"]:
            shape = tuple(layer["shape"])
            count = int(np.prod(shape))
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise FormatError(f"{path}: truncated weights for {layer['name']}")
            buf = np.frombuffer(raw, dtype="<f4")
            arrays.append(buf.reshape(shape).astype(np.float64))
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after weights")
    n_trunk = manifest["n_trunk"]
    it = iter(arrays)
    trunk = [(next(it), next(it)) for _ in range(n_trunk)]
    heads = {h: (next(it), next(it)) for h in HEADS}
    return EncoderParams(trunk, heads, manifest["leaky_slope"]), manifest.get("meta", {})
