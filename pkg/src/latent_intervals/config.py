"""Run configuration: one INI file per run, validated on load.

Unknown sections or keys are errors. Every section is optional; missing keys
take the defaults below. A canonical copy is written into each run
directory.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import BOUNDS, RiskSpec
from .encoder import TrainConfig
from .synth_gen import DOWNSAMPLE_FACTORS, MASK_THRESHOLDS, CorruptionPolicy, CorruptionSpec, Generator


class ConfigError(ValueError):
    pass


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _fmt(seq):
    return ", ".join(f"{v:g}" if isinstance(v, float) else str(v) for v in seq)


# section -> key -> (parser, default)
SCHEMA = {
    "run": {"experiment": (str, "default"), "seed": (int, 0), "out_dir": (str, "runs")},
    "generator": {"dim": (int, 8), "height": (int, 32), "width": (int, 32)},
    "corruption": {
        "kind": (str, "downsample"),
        "factors": (_ints, DOWNSAMPLE_FACTORS),
        "thresholds": (_floats, tuple(MASK_THRESHOLDS.values())),
    },
    "data": {"n": (int, 50000), "train_ratio": (float, 0.8), "calibration_ratio": (float, 0.1)},
    "train": {
        "alpha": (float, 0.1),
        "epochs": (int, 50),
        "batch_size": (int, 64),
        "lr": (float, 0.01),
        "recon_weight": (float, 10.0),
        "hidden": (_ints, (256, 128)),
        "leaky_slope": (float, 0.01),
        "dim_mask": (str, "all"),
    },
    "risk": {"alpha": (float, 0.1), "delta": (float, 0.1), "bound": (str, "hoeffding-bentkus")},
    "lambda": {"max": (float, 10.0), "points": (int, 1000)},
    "coverage": {"n_trials": (int, 100), "pool_size": (int, 10000)},
    "adaptivity": {"n_per_level": (int, 500), "levels": (str, "auto")},
    "visualize": {"sample": (int, 0), "dims": (str, "all")},
    "ablate": {"recon_weights": (_floats, (0.0, 1.0, 10.0))},
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        section, name = key.split(".")
        return self.values[section][name]

    # typed views -----------------------------------------------------------

    @property
    def seed(self):
        return self["run.seed"]

    @property
    def run_dir(self):
        return Path(self["run.out_dir"]) / f"{self['run.experiment']}_seed{self.seed}"

    @property
    def generator(self):
        return Generator(self["generator.dim"], self["generator.height"], self["generator.width"])

    @property
    def policy(self):
        return CorruptionPolicy(self["corruption.kind"], self["corruption.factors"], self["corruption.thresholds"])

    @property
    def ratios(self):
        a, b = self["data.train_ratio"], self["data.calibration_ratio"]
        return (a, b, 1.0 - a - b)

    def train_config(self, **overrides):
        kw = dict(
            alpha=self["train.alpha"],
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lr=self["train.lr"],
            recon_weight=self["train.recon_weight"],
            seed=self.seed,
            hidden=self["train.hidden"],
            leaky_slope=self["train.leaky_slope"],
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    @property
    def risk(self):
        return RiskSpec(self["risk.alpha"], self["risk.delta"])

    @property
    def bound(self):
        return self["risk.bound"]

    @property
    def grid(self):
        return np.linspace(0.0, self["lambda.max"], self["lambda.points"])

    @property
    def dim_mask(self):
        return _parse_dims(self["train.dim_mask"], self["generator.dim"], "train.dim_mask")

    @property
    def visualize_dims(self):
        text = self["visualize.dims"]
        if text.strip() == "all":
            return [int(d) for d in np.flatnonzero(self.dim_mask)]
        return [int(d) for d in _ints(text)]

    @property
    def adaptivity_levels(self):
        text = self["adaptivity.levels"].strip()
        kind = self["corruption.kind"]
        if kind == "mask":
            vals = tuple(MASK_THRESHOLDS.values()) if text == "auto" else _floats(text)
            return [CorruptionSpec("mask", mask_threshold=v) for v in vals]
        vals = (1, 8, 32) if text == "auto" else _ints(text)
        return [CorruptionSpec("downsample", downsample_factor=v) for v in vals]

    # serialization ---------------------------------------------------------

    def to_ini(self):
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for k in keys:
                v = self.values[section][k]
                lines.append(f"{k} = {_fmt(v) if isinstance(v, tuple) else v}")
            lines.append("")
        return "\n".join(lines)

    def validate(self):
        try:
            g = self.generator
            p = self.policy
            for f in p.factors:
                if g.height % f or g.width % f:
                    raise ConfigError(f"downsample factor {f} does not divide {g.height}x{g.width}")
            self.train_config()
            self.risk
            if self.bound not in BOUNDS:
                raise ConfigError(f"risk.bound must be one of {BOUNDS}")
            if self["lambda.points"] < 2 or self["lambda.max"] <= 0:
                raise ConfigError("lambda grid needs points >= 2 and max > 0")
            if self["data.n"] < 10:
                raise ConfigError(f"data.n must be at least 10, got {self['data.n']}")
            a, b, c = self.ratios
            if min(a, b, c) < 0:
                raise ConfigError("data ratios must be nonnegative and sum to at most 1")
            if self["coverage.n_trials"] < 1 or self["adaptivity.n_per_level"] < 1:
                raise ConfigError("coverage.n_trials and adaptivity.n_per_level must be positive")
            if self["coverage.pool_size"] < 100:
                raise ConfigError("coverage.pool_size must be at least 100")
            self.dim_mask
            self.adaptivity_levels
            bad = [d for d in self.visualize_dims if not (0 <= d < g.dim and self.dim_mask[d])]
            if bad:
                raise ConfigError(f"visualize.dims {bad} are not relevant dimensions")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self


def _parse_dims(text, dim, key):
    text = text.strip()
    if text == "all":
        return np.ones(dim, dtype=bool)
    idx = _ints(text)
    mask = np.zeros(dim, dtype=bool)
    for d in idx:
        if not 0 <= d < dim:
            raise ConfigError(f"{key}: dimension {d} out of range")
        mask[d] = True
    if not mask.any():
        raise ConfigError(f"{key} selects no dimensions")
    return mask


def default_config():
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    cfg = default_config()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            conv = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = conv(raw.strip())
            except ValueError as e:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {raw!r}") from e
    return cfg.validate()


def load_config(path=None):
    if path is None:
        return default_config().validate()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    return parse_config(text, str(path))
