"""LBRM checkpoint container.

Layout (little-endian)::

    b"LBRM" | u16 version=1 | u32 len | utf-8 "key=value\\n" config block
    u32 n_tensors
    per tensor: u16 len | utf-8 name | u8 dtype tag | u8 ndim | ndim x u32 | payload

Config keys are ``kind``, free metadata, and ``model.<field>`` entries.
Codebook tensors are stored under ``vq.vectors``, ``vq.ema_counts``,
``vq.ema_sums`` (and ``vq.usage_age``).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .errors import FormatError

MAGIC = b"LBRM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_RENAME = (("codebook.", "vq."), ("tokenizer.codebook.", "tokenizer.vq."))


def _to_file_name(name: str) -> str:
    for a, b in _RENAME[::-1]:
        if name.startswith(a):
            return b + name[len(a):]
    return name


def _from_file_name(name: str) -> str:
    for a, b in _RENAME[::-1]:
        if name.startswith(b):
            return a + name[len(b):]
    return name


def save_checkpoint(path, cfg: ModelConfig, tensors: dict, meta: dict | None = None) -> None:
    block = {**{k: str(v) for k, v in (meta or {}).items()},
             **{f"model.{k}": v for k, v in cfg.to_dict().items()}}
    text = "".join(f"{k}={v}\n" for k, v in block.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu()
        if t.dtype not in _TAGS:
            raise FormatError(f"unsupported dtype {t.dtype} for {name}")
        raw = _to_file_name(name).encode("utf-8")
        arr = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[_TAGS[t.dtype]])
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAGS[t.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Returns (ModelConfig, {name: tensor}, meta)."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, n = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    meta, model_kv = {}, {}
    for line in take(n).decode("utf-8").splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        if k.startswith("model."):
            model_kv[k[6:]] = v
        else:
            meta[k] = v
    cfg = ModelConfig.from_dict(model_kv)
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = _from_file_name(take(ln).decode("utf-8"))
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[tag]
        size = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(take(size), dtype=dt).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr)
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after tensors")
    return cfg, tensors, meta


def describe(path) -> list[str]:
    cfg, tensors, meta = load_checkpoint(path)
    lines = [f"{k}={v}" for k, v in meta.items()]
    lines += [f"model.{k}={v}" for k, v in cfg.to_dict().items()]
    lines.append(f"tensors={len(tensors)}")
    lines.append(f"parameters={sum(t.numel() for t in tensors.values())}")
    for name, t in tensors.items():
        lines.append(f"tensor {_to_file_name(name)} {str(t.dtype).replace('torch.', '')} "
                     f"{'x'.join(map(str, t.shape)) or 'scalar'}")
    return lines


def save_model(path, model, kind: str, meta: dict | None = None, optimizer=None) -> None:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(dict(optimizer.named_moments()))
        meta = {**(meta or {}), "opt.step": optimizer.step_count}
    save_checkpoint(path, model.cfg, tensors, {"kind": kind, **(meta or {})})


def load_model(path, **kwargs):
    """Rebuild the module recorded in the checkpoint and load its tensors."""
    from .model import Classifier
    from .pretrain import MEMModel
    from .tokenizer import Tokenizer

    cfg, tensors, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "tokenizer":
        model = Tokenizer(cfg)
    elif kind == "mem":
        model = MEMModel(cfg)
    elif kind == "classifier":
        model = Classifier(cfg, int(meta["n_out"]))
    else:
        raise FormatError(f"{path}: unknown checkpoint kind {kind!r}")
    model = model.to(cfg.dtype)
    state = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model.load_state_dict(state, strict=True)
    return model, meta
