"""Neural Transformer backbone.

Inputs are batches of patch grids as three tensors: ``x`` (B, N, w) raw
patches, ``chan`` (B, N) registry indices and ``time`` (B, N) 1-based time
slots. Every patch runs through the temporal conv encoder independently.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError


def trunc_normal_(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std)


def drop_path(x: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    if p == 0.0 or not training:
        return x
    keep = 1.0 - p
    mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
    return x * mask / keep


class TemporalEncoder(nn.Module):
    """Conv1d -> GroupNorm -> GELU blocks applied to each patch, flattened to d."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        spec = cfg.conv
        self.blocks = nn.ModuleList()
        for cin, cout, k, s, p in zip(spec.in_channels, spec.out_channels, spec.kernel,
                                      spec.stride, spec.padding):
            self.blocks.append(nn.ModuleDict({
                "conv": nn.Conv1d(cin, cout, k, stride=s, padding=p),
                "norm": nn.GroupNorm(cfg.norm_groups, cout, eps=cfg.ln_eps),
            }))
        self.patch_w = cfg.patch_w
        flat = spec.flat_width(cfg.patch_w)
        self.proj = nn.Linear(flat, cfg.hidden_d, bias=False) if flat != cfg.hidden_d else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, w = x.shape
        if w != self.patch_w:
            raise ConfigError(f"patch width {w} does not match the configured {self.patch_w}")
        h = x.reshape(B * N, 1, w)
        for blk in self.blocks:
            h = F.gelu(blk["norm"](blk["conv"](h)))
        h = h.flatten(1)  # channel-major
        if self.proj is not None:
            h = self.proj(h)
        return h.reshape(B, N, -1)


def attention_weights(q: torch.Tensor, k: torch.Tensor, q_norm: nn.LayerNorm,
                      k_norm: nn.LayerNorm) -> torch.Tensor:
    """softmax(LN(q) LN(k)^T / sqrt(d_head)) for (..., N, d_head) inputs."""
    logits = q_norm(q) @ k_norm(k).transpose(-2, -1) / math.sqrt(q.shape[-1])
    return logits.softmax(dim=-1)


class LNQKAttention(nn.Module):
    def __init__(self, d: int, heads: int, eps: float = 1e-6):
        super().__init__()
        self.heads = heads
        self.d_head = d // heads
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.q_norm = nn.LayerNorm(self.d_head, eps=eps)
        self.k_norm = nn.LayerNorm(self.d_head, eps=eps)
        self.proj = nn.Linear(d, d)

    def split(self, x: torch.Tensor):
        *lead, N, d = x.shape
        qkv = self.qkv(x).reshape(*lead, N, 3, self.heads, self.d_head)
        q, k, v = qkv.movedim(-3, 0).transpose(-3, -2).unbind(0)
        return q, k, v  # each (..., heads, N, d_head)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        q, k, _ = self.split(x)
        return attention_weights(q, k, self.q_norm, self.k_norm)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.split(x)
        out = attention_weights(q, k, self.q_norm, self.k_norm) @ v
        out = out.transpose(-3, -2).flatten(-2)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm residual block with layer-scale on both branches."""

    def __init__(self, d: int, heads: int, mlp_d: int, layer_scale: float, eps: float,
                 drop_path: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, eps=eps)
        self.attn = LNQKAttention(d, heads, eps)
        self.norm2 = nn.LayerNorm(d, eps=eps)
        self.mlp = Mlp(d, mlp_d)
        self.gamma1 = nn.Parameter(torch.full((d,), float(layer_scale)))
        self.gamma2 = nn.Parameter(torch.full((d,), float(layer_scale)))
        self.drop_path = drop_path

    def forward(self, x):
        x = x + drop_path(self.gamma1 * self.attn(self.norm1(x)), self.drop_path, self.training)
        x = x + drop_path(self.gamma2 * self.mlp(self.norm2(x)), self.drop_path, self.training)
        return x


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            trunc_normal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class PositionEmbedding(nn.Module):
    """Learnable temporal and spatial tables, added to token embeddings."""

    def __init__(self, cfg: ModelConfig, d: int):
        super().__init__()
        self.tmax = cfg.tmax
        self.time_embed = nn.Parameter(trunc_normal_(torch.empty(cfg.tmax, d)))
        self.spatial_embed = nn.Parameter(trunc_normal_(torch.empty(cfg.registry_size, d)))
        self.use_spatial = cfg.use_spatial

    def forward(self, e: torch.Tensor, chan: torch.Tensor, time: torch.Tensor) -> torch.Tensor:
        if time.numel() and (int(time.max()) > self.tmax or int(time.min()) < 1):
            raise ConfigError(f"time index outside [1, {self.tmax}]")
        if chan.numel() and int(chan.max()) >= self.spatial_embed.shape[0]:
            raise ConfigError("channel index outside the registry")
        out = e + self.time_embed[time - 1]
        if self.use_spatial:
            out = out + self.spatial_embed[chan]
        return out


class NeuralTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, depth: int | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_d
        depth = cfg.layers if depth is None else depth
        self.temporal = TemporalEncoder(cfg)
        self.pos = PositionEmbedding(cfg, d)
        self.mask_token = nn.Parameter(torch.zeros(d)) if cfg.mask_token else None
        rates = torch.linspace(0, cfg.drop_path, depth).tolist() if depth else []
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_d, cfg.layer_scale_init, cfg.ln_eps, r) for r in rates)
        self.norm = nn.LayerNorm(d, eps=cfg.ln_eps)
        init_weights(self)
        if self.mask_token is not None:
            trunc_normal_(self.mask_token.data)

    def set_drop_path(self, rate: float) -> None:
        n = len(self.blocks)
        for blk, r in zip(self.blocks, torch.linspace(0, rate, n).tolist() if n else []):
            blk.drop_path = r

    def embed(self, x, chan, time, mask=None):
        e = self.temporal(x)
        if mask is not None:
            if mask.shape != e.shape[:2]:
                raise ConfigError(f"mask shape {tuple(mask.shape)} != {tuple(e.shape[:2])}")
            e = torch.where(mask.unsqueeze(-1), self.mask_token.to(e.dtype), e)
        return self.pos(e, chan, time)

    def forward(self, x, chan, time, mask=None) -> torch.Tensor:
        h = self.embed(x, chan, time, mask)
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)


class PoolHead(nn.Module):
    """Mean over the token axis followed by a linear head."""

    def __init__(self, d: int, n_out: int):
        super().__init__()
        self.fc = nn.Linear(d, n_out)
        trunc_normal_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.fc(h.mean(dim=-2))


class Classifier(nn.Module):
    """Backbone plus pooled task head; the fine-tuning model."""

    def __init__(self, cfg: ModelConfig, n_out: int):
        super().__init__()
        self.cfg = cfg
        self.n_out = n_out
        self.backbone = NeuralTransformer(cfg)
        self.head = PoolHead(cfg.hidden_d, n_out)

    @classmethod
    def from_backbone(cls, backbone: nn.Module, n_out: int) -> "Classifier":
        """Fresh head on a copy of a pretrained backbone (mask token included)."""
        model = cls(backbone.cfg, n_out)
        model.backbone.load_state_dict(backbone.state_dict())
        return model.to(next(backbone.parameters()).dtype)

    def forward(self, x, chan, time):
        return self.head(self.backbone(x, chan, time))
