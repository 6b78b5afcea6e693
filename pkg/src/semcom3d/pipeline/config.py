"""Flat run configuration, its YAML form and the content hash that keys every output row."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..csi.gdce import ESTIMATORS
from ..channel import MODELS
from ..errors import FormatError, InvalidArgumentError

OUTPUT_ENV = "SEMCOM3D_OUTPUT_DIR"

# keys that never change results and so stay out of the hash
_UNHASHED = ("output_dir", "record_wall_time")


@dataclass
class RunConfig:
    """Every knob of a run. Empty path strings mean "build it in output_dir"."""

    # scene and views
    scene_seed: int = 0
    n_objects: int = 3
    dataset: str = ""
    # prompt: a pixel, a text key into prompt_table, or neither (largest object in the prompt view)
    prompt_view: int = 12
    prompt_point: list = field(default_factory=list)
    prompt_text: str = ""
    prompt_table: str = ""
    # transmitter radiance field and mask lifting
    nerf_checkpoint: str = ""
    nerf_epochs: int = 4
    nerf_samples: int = 64
    mask_grid: str = ""
    lift_iters: int = 300
    lift_lambda: float = 0.05
    mask_threshold: float = 0.5
    # codec
    codec_checkpoint: str = ""
    codec_mode: str = "teacher"
    keep_rate: float = 0.2
    quant_bits: int = 16
    codec_epochs: int = 60
    codec_images: int = 400
    # channel and CSI
    channel_model: str = "rician"
    k_factor: float = 3.0
    channel_grid: list = field(default_factory=lambda: [16, 16])
    pilot_spacing: int = 4
    estimator: str = "true"
    gdce_checkpoint: str = ""
    gdce_train_samples: int = 2000
    csi_refresh: str = "run"
    equalizer: str = "elementwise"
    # receiver
    receiver_epochs: int = 4
    # sweep
    snr_db: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0, 25.0])
    seeds: list = field(default_factory=lambda: [0])
    # output
    output_dir: str = "runs/default"
    record_wall_time: bool = False

    def __post_init__(self):
        self.snr_db = [float(s) for s in self.snr_db]
        self.seeds = [int(s) for s in self.seeds]
        self.prompt_point = [int(v) for v in self.prompt_point]
        self.channel_grid = [int(v) for v in self.channel_grid]

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if not self.snr_db:
            raise InvalidArgumentError("snr_db list is empty")
        if any(math.isnan(s) for s in self.snr_db):
            raise InvalidArgumentError("snr_db entries must be numbers")
        if not self.seeds:
            raise InvalidArgumentError("seeds list is empty")
        if self.estimator not in ESTIMATORS:
            raise InvalidArgumentError(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if self.channel_model not in MODELS:
            raise InvalidArgumentError(f"unknown channel model {self.channel_model!r}")
        if self.codec_mode not in ("teacher", "student"):
            raise InvalidArgumentError(f"codec_mode must be teacher or student, got {self.codec_mode!r}")
        if not 0 < self.keep_rate <= 1:
            raise InvalidArgumentError(f"keep_rate must be in (0, 1], got {self.keep_rate}")
        if self.csi_refresh not in ("run", "view"):
            raise InvalidArgumentError(f"csi_refresh must be 'run' or 'view', got {self.csi_refresh!r}")
        if self.equalizer not in ("elementwise", "pseudo_inverse"):
            raise InvalidArgumentError(f"unknown equalizer {self.equalizer!r}")
        if self.prompt_point and len(self.prompt_point) != 2:
            raise InvalidArgumentError("prompt_point must be [row, col]")
        if self.prompt_text and not self.prompt_table:
            raise InvalidArgumentError("prompt_text needs a prompt_table")
        if len(self.channel_grid) != 2 or min(self.channel_grid) < 1:
            raise InvalidArgumentError(f"channel_grid must be two positive ints, got {self.channel_grid}")
        for name in ("n_objects", "nerf_samples", "quant_bits", "pilot_spacing"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if check_paths:
            for name in ("dataset", "nerf_checkpoint", "mask_grid", "codec_checkpoint", "gdce_checkpoint",
                         "prompt_table"):
                p = getattr(self, name)
                if p and not Path(p).exists():
                    raise InvalidArgumentError(f"{name} {p!r} does not exist")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


FIELD_TYPES = {f.name: f for f in dataclasses.fields(RunConfig)}


def coerce(key: str, value):
    """Convert a CLI/YAML value to the declared field type."""
    if key not in FIELD_TYPES:
        raise InvalidArgumentError(f"unknown config key {key!r}")
    default = RunConfig().to_dict()[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return list(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"bad value {value!r} for {key}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """YAML file (optional) plus overrides; the output directory env var wins over both."""
    data = {}
    if path:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise FormatError(f"unreadable config ({exc})", path) from exc
        if not isinstance(data, dict):
            raise FormatError("config must be a flat mapping", path)
        for k, v in data.items():
            if isinstance(v, dict):
                raise FormatError(f"nested value under {k!r}; the config is flat", path)
    data = {k: coerce(k, v) for k, v in data.items()}
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = coerce(k, v)
    if os.environ.get(OUTPUT_ENV):
        data["output_dir"] = os.environ[OUTPUT_ENV]
    return RunConfig(**data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
