"""Flat sectioned run configuration with typed defaults and presets.

Config files are UTF-8 ``key=value`` lines under ``[section]`` headers.
Command-line flags override individual keys as ``--section.key=value``.
Unknown sections or keys are rejected; the fully resolved config is echoed
into every output directory so a run can be reproduced from it alone.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoder import ConformerConfig
from .errors import ConfigError
from .masking import MaskConfig, MaskPolicy
from .training import TrainConfig


@dataclass
class DataSection:
    seed: int = 7
    num_utts: int = 300
    t_min: int = 40
    t_max: int = 100
    dim: int = 16
    num_classes: int = 4
    noise_sigma: float = 0.1


@dataclass
class MaskSection:
    block_len: int = 7
    ratio: float = 0.15
    policy: str = "zero"  # "zero" | "tera"
    p_zero: float = 0.8
    p_random: float = 0.1


@dataclass
class ModelSection:
    input_dim: int = 16
    model_dim: int = 16
    num_heads: int = 2
    ff_dim: int = 32
    conv_kernel: int = 7
    max_layers: int = 8
    min_layers: int = 2
    share_params: bool = True
    dropout: float = 0.1
    pos_bias: str = "relative-bias"


@dataclass
class TrainSection:
    batch_size: int = 8
    max_steps: int = 2000
    warmup_steps: int = 200
    peak_scale: float = 0.5
    validation_every: int = 100
    seed: int = 0
    depth: str = "uniform:2:8"  # "fixed:N" | "uniform:L:H"
    loss_mode: str = "all-frames"
    val_fraction: float = 0.1
    grad_clip: float = 0.0
    threads: int = 1
    precision: str = "float32"


@dataclass
class DiagSection:
    frame_start: int = 0
    frame_end: int = 50
    utterance: int = 0
    grad_depth: int = 8
    flop_frames: int = 100


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    mask: MaskSection = field(default_factory=MaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    diag: DiagSection = field(default_factory=DiagSection)

    def section(self, name: str):
        if name not in ("data", "mask", "model", "train", "diag"):
            raise ConfigError(f"unknown config section {name!r}")
        return getattr(self, name)

    def set_key(self, section: str, key: str, raw: str) -> None:
        obj = self.section(section)
        match = {f.name: f for f in fields(obj)}
        if key not in match:
            raise ConfigError(f"unknown config key {section}.{key}")
        current = getattr(obj, key)
        if isinstance(current, bool):
            if raw not in ("true", "false", "True", "False", "1", "0"):
                raise ConfigError(f"{section}.{key} must be a boolean, got {raw!r}")
            value = raw in ("true", "True", "1")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        setattr(obj, key, value)

    # ---- resolution ---------------------------------------------------------

    def model_config(self) -> ConformerConfig:
        m = self.model
        return ConformerConfig(
            input_dim=m.input_dim, model_dim=m.model_dim, num_heads=m.num_heads,
            ff_dim=m.ff_dim, conv_kernel=m.conv_kernel, max_layers=m.max_layers,
            min_layers=m.min_layers, share_params=m.share_params,
            dropout=m.dropout, pos_bias=m.pos_bias,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        mode, fixed, low, high = parse_depth(t.depth)
        return TrainConfig(
            batch_size=t.batch_size, max_steps=t.max_steps, warmup_steps=t.warmup_steps,
            peak_scale=t.peak_scale, validation_every=t.validation_every, seed=t.seed,
            depth_mode=mode, depth_fixed=fixed, depth_low=low, depth_high=high,
            loss_mode=t.loss_mode, val_fraction=t.val_fraction, grad_clip=t.grad_clip,
            threads=t.threads, precision=t.precision,
        )

    def mask_config(self) -> MaskConfig:
        m = self.mask
        return MaskConfig(
            block_len=m.block_len, ratio=m.ratio,
            policy=MaskPolicy(kind=m.policy, p_zero=m.p_zero, p_random=m.p_random),
        )

    def echo(self) -> str:
        lines = []
        for name in ("data", "mask", "model", "train", "diag"):
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in fields(obj):
                lines.append(f"{f.name}={getattr(obj, f.name)}")
            lines.append("")
        return "\n".join(lines)

    def write_echo(self, out_dir: str | Path) -> None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "resolved_config.ini").write_text(self.echo(), encoding="utf-8")


def parse_depth(spec: str) -> tuple[str, int, int, int]:
    parts = spec.split(":")
    try:
        if parts[0] == "fixed" and len(parts) == 2:
            n = int(parts[1])
            return "fixed", n, n, n
        if parts[0] == "uniform" and len(parts) == 3:
            return "uniform", 0, int(parts[1]), int(parts[2])
    except ValueError:
        pass
    raise ConfigError(f"depth must be 'fixed:N' or 'uniform:L:H', got {spec!r}")


def load_config(path: str | Path) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg = RunConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg.set_key(section, key, value)
    return cfg


PRESETS = {
    # desk-scale defaults with depth sampling and sharing on
    "desk-shared-u28": {"model.share_params": "true", "train.depth": "uniform:2:8"},
    # desk-scale baseline: independent layers, fixed full depth
    "desk-unshared-8": {"model.share_params": "false", "train.depth": "fixed:8"},
    # full-scale architecture constants; emitted for reporting, not desk training
    "paper": {
        "model.input_dim": "80", "model.model_dim": "512", "model.num_heads": "4",
        "model.ff_dim": "2048", "model.conv_kernel": "15", "model.max_layers": "8",
        "model.min_layers": "2", "model.share_params": "true", "model.dropout": "0.1",
        "train.warmup_steps": "8000", "train.batch_size": "8", "train.depth": "uniform:2:8",
    },
}


def apply_preset(cfg: RunConfig, name: str) -> None:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    for dotted, value in PRESETS[name].items():
        section, _, key = dotted.partition(".")
        cfg.set_key(section, key, value)


def apply_override(cfg: RunConfig, dotted: str, value: str) -> None:
    section, sep, key = dotted.partition(".")
    if not sep:
        raise ConfigError(f"override must look like section.key=value, got {dotted!r}")
    cfg.set_key(section, key, value)
