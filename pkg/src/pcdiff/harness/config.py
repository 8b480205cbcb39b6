"""Run configuration and run manifest, both flat JSON documents."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..degrade import TASK_SPECS, DegradationSpec
from ..model import ModelConfig

TASKS = tuple(TASK_SPECS)

# keys that change the network or the schedule; a checkpoint only loads under matching values
MODEL_KEYS = ("d", "c1", "c2", "c_sa1", "c_sa2", "c_l", "z", "d_k", "h1", "h2", "h3",
              "k_enc", "k_dec", "k_interp", "patch", "radius_px", "T", "beta_min", "beta_max")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "combination"
    # model widths (see ModelConfig)
    d: int = 3
    c1: int = 16
    c2: int = 16
    c_sa1: int = 32
    c_sa2: int = 64
    c_l: int = 64
    z: int = 128
    d_k: int = 32
    h1: int = 64
    h2: int = 128
    h3: int = 256
    k_enc: int = 16
    k_dec: int = 8
    k_interp: int = 4
    patch: int = 4
    radius_px: float = 2.0
    # schedule
    T: int = 200
    beta_min: float = 5e-4
    beta_max: float = 0.1
    # optimisation
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 200
    steps_per_epoch: int = 10
    batch: int = 4
    lr_decay_start: float = 1.0  # fraction of training after which lr decays linearly to lr_final
    lr_final: float = 1e-4
    small_t_fraction: float = 0.0  # share of draws taken from [1, small_t_max] instead of [1, T]
    small_t_max: int = 10
    # data
    dataset: str = ""
    scenes: int = 4
    scene_kinds: str = "cube,sphere-shell,two-room,checker-terrain"
    n_gt: int = 512
    image_size: int = 32
    remove_fraction: float | None = None
    patch_count: int | None = None
    keep_ratio: float | None = None
    noise_level: float | None = None
    strip_color: bool | None = None
    # sampling
    steps: int | None = None  # reverse steps; the full chain of T when unset
    ratio: float | None = None
    n_out: int | None = None
    seed: int = 0
    out: str = "run"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {', '.join(TASKS)}, got {self.task!r}")
        if self.d not in (3, 6):
            raise ConfigError("d must be 3 (geometry) or 6 (geometry + colour)")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for k in ("epochs", "steps_per_epoch", "batch", "T", "scenes", "n_gt"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be at least 1")
        if not 0.0 <= self.small_t_fraction <= 1.0:
            raise ConfigError("small_t_fraction must lie in [0, 1]")
        if not 1 <= self.small_t_max <= self.T:
            raise ConfigError("small_t_max must lie in [1, T]")
        if self.steps is not None and not 1 <= self.steps <= self.T:
            raise ConfigError(f"steps={self.steps} must lie in [1, T={self.T}]")
        unknown = set(self.kinds()) - {"cube", "sphere-shell", "two-room", "checker-terrain"}
        if unknown:
            raise ConfigError(f"unknown scene kinds {sorted(unknown)}")

    def sampling_steps(self) -> int:
        return self.T if self.steps is None else self.steps

    def kinds(self) -> list[str]:
        return [k.strip() for k in self.scene_kinds.split(",") if k.strip()]

    def model(self) -> ModelConfig:
        return ModelConfig.from_dict(asdict(self))

    def degradation(self, seed: int) -> DegradationSpec:
        """Task preset, overridden by any explicitly set degradation key."""
        spec = dict(TASK_SPECS[self.task])
        for k in ("remove_fraction", "patch_count", "keep_ratio", "noise_level", "strip_color"):
            if getattr(self, k) is not None:
                spec[k] = getattr(self, k)
        return DegradationSpec(**spec, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        extra = sorted(set(d) - names)
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(extra)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(doc)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def model_mismatch(self, other: "RunConfig") -> list[str]:
        return [k for k in MODEL_KEYS if getattr(self, k) != getattr(other, k)]


@dataclass
class RunManifest:
    config_hash: str
    dataset_hash: str
    param_count: int
    epoch_losses: list[float] = field(default_factory=list)
    metrics: dict | None = None
    wall_clock: float = 0.0
    version: str = ""

    def save(self, path) -> None:
        write_atomic(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def write_atomic(path, text: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode() if isinstance(text, str) else text
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
