"""Run configuration: defaults, config-file parsing, dotted-name overrides,
and a canonical serialized form for provenance and checkpoints.

Config files are flat key/value text with optional section headers:

    master_seed = 7
    model.dim = 128
    [train]
    epochs = 20

Every field is also overridable on the command line by its dotted name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from .inference import InferenceConfig
from .model import DsrConfig
from .rng import RngStreams


@dataclass
class TrainSettings:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    history_depth: int = 10
    per_batch_step_sampling: bool = False
    rec_loss_on_clean: bool = False


@dataclass
class InferSettings:
    mode: str = "efficient"
    num_seeds: int = 10
    seeds: Optional[tuple] = None  # explicit seed list; derived from master when None


@dataclass
class RunConfig:
    dataset: str = ""
    out_dir: str = "runs/latest"
    master_seed: int = 2023
    model: DsrConfig = field(default_factory=DsrConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    infer: InferSettings = field(default_factory=InferSettings)

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.train.epochs < 0 or self.train.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.infer.mode not in ("efficient", "full_chain"):
            raise ValueError(f"unknown inference mode {self.infer.mode!r}")
        if self.infer.num_seeds < 1:
            raise ValueError("num_seeds must be positive")
        return self

    def resolve_seeds(self) -> tuple:
        """Explicit seed list, or one derived from the master seed."""
        if self.infer.seeds is not None:
            return tuple(int(s) for s in self.infer.seeds)
        gen = RngStreams(self.master_seed).get("inference-seeds")
        return tuple(int(s) for s in gen.integers(0, 2**31 - 1, size=self.infer.num_seeds))

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(mode=self.infer.mode, seeds=self.resolve_seeds())


_SECTIONS = ("model", "train", "infer")


def to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def from_dict(payload: dict) -> RunConfig:
    cfg = RunConfig(
        dataset=payload.get("dataset", ""),
        out_dir=payload.get("out_dir", "runs/latest"),
        master_seed=int(payload.get("master_seed", 2023)),
        model=DsrConfig(**payload.get("model", {})),
        train=TrainSettings(**payload.get("train", {})),
        infer=InferSettings(**payload.get("infer", {})),
    )
    if cfg.infer.seeds is not None:
        cfg.infer.seeds = tuple(cfg.infer.seeds)
    return cfg


def canonical_json(config: RunConfig) -> str:
    """Stable serialized form: sorted keys, no whitespace variance."""
    return json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))


def config_digest(config: RunConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def flatten(config: RunConfig) -> dict:
    """Dotted-name view of every field, e.g. model.dim -> 256."""
    out = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(config, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            out[f.name] = value
    return out


def _parse_value(current, text: str):
    """Parse a config-file/CLI string against the field's current value type."""
    text = text.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if current is None or isinstance(current, tuple):
        if text.lower() in ("none", "null", ""):
            return None
        return tuple(int(p) for p in text.replace(",", " ").split())
    return text


def set_dotted(config: RunConfig, key: str, text: str) -> None:
    """Assign one dotted-name field from its string form."""
    parts = key.split(".")
    target = config
    if len(parts) == 2:
        if parts[0] not in _SECTIONS:
            raise ValueError(f"unknown config section {parts[0]!r} in {key!r}")
        target = getattr(config, parts[0])
        name = parts[1]
    elif len(parts) == 1:
        name = parts[0]
    else:
        raise ValueError(f"malformed config key {key!r}")
    if not hasattr(target, name) or name in _SECTIONS:
        raise ValueError(f"unknown config key {key!r}")
    setattr(target, name, _parse_value(getattr(target, name), text))


def parse_config_file(path) -> dict:
    """Read key = value lines (with optional [section] headers) into a dict."""
    overrides = {}
    section = ""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section and section not in _SECTIONS:
                    raise ValueError(f"{path}:{lineno}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            key = key.strip()
            if section:
                key = f"{section}.{key}"
            overrides[key] = value.strip()
    return overrides


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then config file, then explicit overrides (last wins)."""
    config = RunConfig()
    if path:
        for key, value in parse_config_file(path).items():
            set_dotted(config, key, value)
    for key, value in (overrides or {}).items():
        set_dotted(config, key, value)
    return config.validate()
