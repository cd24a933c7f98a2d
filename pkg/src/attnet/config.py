"""Strict ``key=value`` run configuration."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .data import read_manifest
from .evaluation import DEFAULT_TOP_N, EvalProtocol
from .exceptions import ConfigError
from .model import WIDTH_PRESETS, ModelConfig
from .projection import ProjectionConfig
from .training import TrainConfig


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


# key -> (parser, default); default None means "must be given when used"
SCHEMA = {
    "data_root": (str, ""),
    "sequences": (_names, ()),
    "output_dir": (str, "runs"),
    "precision": (str, "float64"),
    "max_frames": (int, 0),
    "width": (int, 1024),
    "height": (int, 64),
    "fov_up": (float, 3.0),
    "fov_down": (float, 25.0),
    "encoder_depth": (int, 3),
    "attention_depth": (int, 1),
    "widths": (str, "full"),
    "blocks": (_ints, ()),
    "descriptor_dim": (int, 1024),
    "leaky_slope": (float, 0.1),
    "learning_rate": (float, 1e-3),
    "margin": (float, None),
    "epochs": (int, 20),
    "pairs_per_epoch": (int, 32),
    "seed": (int, None),
    "checkpoint_every": (int, 0),
    "freeze": (_names, ()),
    "top_n": (_ints, DEFAULT_TOP_N),
    "threshold": (float, 0.5),
    "r_th": (float, None),
    "min_frame_gap": (int, 100),
    "ablation_encoders": (_ints, (1, 3, 5)),
    "ablation_attention": (_ints, (0, 1)),
    "margins": (_floats, (0.5, 0.85)),
    "bench_frames": (int, 20),
    "bench_warmup": (int, 2),
    "remission_normalize": (_bool, True),
}

EXPERIMENT_KEYS = ("seed", "margin", "r_th")


@dataclass(frozen=True)
class RunConfig:
    values: dict
    source: str = ""

    def __getattr__(self, key):
        values = self.__dict__.get("values", {})
        if key in values:
            return values[key]
        raise AttributeError(key)

    def require(self, *keys):
        missing = [k for k in keys if self.values.get(k) is None]
        if missing:
            raise ConfigError(f"experiment runs must set {', '.join(missing)} explicitly")

    def dataset_root(self):
        root = self.values["data_root"] or os.environ.get("ATTNET_DATA_ROOT", "")
        if not root:
            raise ConfigError("data_root is not set and ATTNET_DATA_ROOT is unset")
        return Path(root)

    def projection(self):
        return ProjectionConfig.from_degrees(self.width, self.height, self.fov_up, self.fov_down)

    def model(self, encoder_depth=None, attention_depth=None):
        widths = self.widths
        preset, explicit = widths, ()
        if widths not in WIDTH_PRESETS:
            try:
                preset, explicit = "full", _ints(widths)
            except ValueError:
                raise ConfigError(f"widths must be a preset name or a comma list, got {widths!r}") from None
        return ModelConfig(
            encoder_depth=encoder_depth or self.encoder_depth,
            attention_depth=self.attention_depth if attention_depth is None else attention_depth,
            preset=preset,
            widths=explicit,
            blocks=self.blocks,
            input_height=self.height,
            input_width=self.width,
            descriptor_dim=self.descriptor_dim,
            leaky_slope=self.leaky_slope,
        )

    def training(self, log_path=None, checkpoint_dir=None):
        return TrainConfig(
            learning_rate=self.learning_rate,
            margin=self.margin if self.margin is not None else 0.85,
            epochs=self.epochs,
            pairs_per_epoch=self.pairs_per_epoch,
            seed=self.seed if self.seed is not None else 0,
            frozen=self.freeze,
            checkpoint_every=self.checkpoint_every,
            checkpoint_dir=str(checkpoint_dir) if checkpoint_dir else None,
            log_path=str(log_path) if log_path else None,
        )

    def protocol(self):
        return EvalProtocol(
            top_n=self.top_n,
            threshold=self.threshold,
            r_th=self.r_th if self.r_th is not None else 6.0,
            min_frame_gap=self.min_frame_gap,
        )

    def echo(self):
        return "\n".join(f"{k}={_render(self.values[k])}" for k in SCHEMA)


def _render(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return "" if value is None else str(value)


def parse_run_config(mapping, source=""):
    values = {}
    for key, value in mapping.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError:
            raise ConfigError(f"invalid value for {key}: {value!r}") from None
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    if values["precision"] not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32 or float64, got {values['precision']!r}")
    return RunConfig(values, source)


def load_run_config(path, overrides=None):
    mapping = read_manifest(path)
    mapping.update(overrides or {})
    return parse_run_config(mapping, str(path))
