"""Model configuration and presets.

``base`` is the full-scale configuration (d=200, 12 layers); ``tiny`` is a
desk-scale preset sized for CPU tests.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch

from . import registry
from .errors import ConfigError


@dataclass(frozen=True)
class ConvSpec:
    in_channels: tuple[int, ...] = (1, 8, 8)
    out_channels: tuple[int, ...] = (8, 8, 8)
    kernel: tuple[int, ...] = (15, 3, 3)
    stride: tuple[int, ...] = (8, 1, 1)
    padding: tuple[int, ...] = (7, 1, 1)

    def output_length(self, w: int) -> int:
        n = w
        for k, s, p in zip(self.kernel, self.stride, self.padding):
            n = (n + 2 * p - k) // s + 1
            if n < 1:
                raise ConfigError(f"conv stack leaves no output for patch width {w}")
        return n

    def flat_width(self, w: int) -> int:
        return self.out_channels[-1] * self.output_length(w)


@dataclass(frozen=True)
class ModelConfig:
    hidden_d: int = 200
    layers: int = 12
    heads: int = 10
    mlp_d: int = 800
    tmax: int = 16
    patch_w: int = 200
    conv: ConvSpec = field(default_factory=ConvSpec)
    norm_groups: int = 4
    layer_scale_init: float = 0.1
    ln_eps: float = 1e-6
    drop_path: float = 0.0
    mask_token: bool = True
    use_spatial: bool = True
    registry_size: int = field(default_factory=registry.size)
    # tokenizer
    codebook_size: int = 8192
    codebook_dim: int = 64
    decoder_layers: int = 3
    ema: bool = True
    ema_decay: float = 0.99
    dead_code_steps: int = 256
    precision: str = "f32"

    def __post_init__(self):
        if self.hidden_d % self.heads:
            raise ConfigError(f"hidden_d={self.hidden_d} not divisible by heads={self.heads}")
        if self.codebook_size < 2:
            raise ConfigError("codebook needs at least two entries")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        for c in self.conv.out_channels:
            if c % self.norm_groups:
                raise ConfigError(f"{c} conv channels not divisible into {self.norm_groups} groups")
        self.conv.output_length(self.patch_w)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "f64" else torch.float32

    @property
    def n_bins(self) -> int:
        return self.patch_w // 2 + 1

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, ConvSpec):
                for cf in dataclasses.fields(v):
                    out[f"conv.{cf.name}"] = ",".join(str(x) for x in getattr(v, cf.name))
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kw, conv = {}, {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for k, v in d.items():
            if k.startswith("conv."):
                conv[k[5:]] = tuple(int(x) for x in v.split(","))
            elif k in types:
                kw[k] = parse_value(types[k], v)
            else:
                raise ConfigError(f"unknown model key {k!r}")
        if conv:
            kw["conv"] = ConvSpec(**conv)
        return cls(**kw)


def parse_value(typ, value: str):
    """Parse a config string against a dataclass field annotation.

    Tuples are comma lists; nested pairs use ``lo:hi`` (``4:8,8:13``);
    optional fields accept ``none``.
    """
    typ = str(typ).replace(" ", "")
    text = value.strip()
    if "None" in typ and text.lower() in ("none", ""):
        return None
    typ = typ.replace("|None", "")
    if typ.startswith("tuple[tuple["):
        try:
            return tuple(tuple(float(x) for x in pair.split(":")) for pair in text.split(","))
        except ValueError:
            raise ConfigError(f"cannot parse {value!r} as lo:hi pairs") from None
    if typ.startswith("tuple["):
        inner = typ[6:-1].split(",")[0]
        return tuple(parse_value(inner, x) for x in text.split(","))
    if typ == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {typ}") from None
    return text


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(":".join(format_value(x) for x in v) if isinstance(v, tuple) else format_value(v)
                        for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return str(value)


PRESETS = {
    "base": ModelConfig(),
    "tiny": ModelConfig(hidden_d=64, layers=2, heads=4, mlp_d=256, codebook_size=64,
                        codebook_dim=32),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg
