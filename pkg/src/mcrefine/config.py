"""Run configuration: a small ``key = value`` format with ``[section]`` headers.

Keys may be written inside a section (``iterations = 20`` under ``[ttgpr]``)
or fully qualified at top level (``ttgpr.iterations = 20``).  ``#`` starts a
comment.  Values are Python-style literals; ``true``/``false`` are accepted
for booleans and ``[lo, hi]`` for intervals.
"""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .rfprior import RFConfig
from .synth import SynthConfig
from .texture import TextureParams
from .ttgpr import TTGPRConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_count: int = 2000
    test_count: int = 200
    backgrounds: str = ""


@dataclass
class SegTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lambda_dice: float = 1.0
    lambda_ft: float = 1.0
    alpha_ft: float = 0.3
    beta_ft: float = 0.7
    gamma_ft: float = 0.75
    lr_schedule: str = "cosine"
    checkpoint_every: int = 0

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_dice, self.lambda_ft, self.alpha_ft, self.beta_ft, self.gamma_ft)


@dataclass
class RFTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-4
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    euler_steps: int = 8
    clip_output: bool = True
    lr_schedule: str = "constant"
    checkpoint_every: int = 0

    def sampler(self) -> RFConfig:
        return RFConfig(euler_steps=self.euler_steps, clip_output=self.clip_output)


@dataclass
class EvalConfig:
    threshold: float = 0.5
    roi: str = ""


@dataclass
class ShiftConfig:
    gain_scale: float = 0.5
    blur_scale: float = 1.5


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    texture: TextureParams = field(default_factory=TextureParams)
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    rf: RFTrainConfig = field(default_factory=RFTrainConfig)
    ttgpr: TTGPRConfig = field(default_factory=TTGPRConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.synth.validate()
        self.texture.validate()
        self.ttgpr.validate()
        for path in (self.data.backgrounds, self.eval.roi):
            if path and not Path(path).exists():
                raise ConfigError(f"referenced path does not exist: {path}")
        if min(self.seg.batch_size, self.rf.batch_size) < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.data.train_count < 1 or self.data.test_count < 1:
            raise ConfigError("dataset sizes must be >= 1")
        if self.rf.euler_steps < 1:
            raise ConfigError("rf.euler_steps must be >= 1")


SECTIONS = [f.name for f in dataclasses.fields(RunConfig) if f.name != "seed"]


def _parse_value(text: str, lineno: int):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"line {lineno}: cannot parse value {text!r}") from exc


def _coerce(default, value, key: str, lineno: int):
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(default):
                raise TypeError
            return tuple(_coerce(d, v, key, lineno) for d, v in zip(default, value))
    except (TypeError, ValueError):
        raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    raise ConfigError(f"line {lineno}: unsupported key type for {key}")


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value_text = (s.strip() for s in line.split("=", 1))
        full = key if "." in key or section is None else f"{section}.{key}"
        value = _parse_value(value_text, lineno)
        if full == "seed":
            cfg.seed = _coerce(0, value, full, lineno)
            continue
        sec, _, name = full.partition(".")
        target = getattr(cfg, sec, None) if sec in SECTIONS else None
        if target is None or not name or name not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"line {lineno}: unknown key {full!r}")
        setattr(target, name, _coerce(getattr(target, name), value, full, lineno))
    return cfg


def load_config(path=None) -> RunConfig:
    text = "" if path is None else Path(path).read_text()
    cfg = parse_config(text)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    return repr(value)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for sec in SECTIONS:
        lines.append("")
        lines.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
