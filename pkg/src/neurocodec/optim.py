"""AdamW with decoupled weight decay, cosine schedule and grad clipping."""
from __future__ import annotations

import math

import torch

from .errors import NumericsError


@torch.no_grad()
def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), weight_decay=0.0, step=1, eps=1e-8):
    """One in-place AdamW update.

    ``state`` maps ``id(param)`` to ``(m, v)`` moment tensors and is filled
    lazily on first use.
    """
    if step < 1:
        raise ValueError("step counts from 1")
    b1, b2 = betas
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for p, g in zip(params, grads):
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise NumericsError("non-finite gradient")
        m, v = state.setdefault(id(p), (torch.zeros_like(p), torch.zeros_like(p)))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if weight_decay:
            p.mul_(1 - lr * weight_decay)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return params


def cosine_lr(step, total_steps, warmup_steps, peak, floor=0.0) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = total_steps - warmup_steps
    progress = 1.0 if span <= 0 else min(1.0, (step - warmup_steps) / span)
    return floor + (peak - floor) * (1 + math.cos(math.pi * progress)) / 2


def param_groups(named_params, lr_scale=None, weight_decay=0.0):
    """Split parameters into decay / no-decay groups with optional per-name LR scale.

    Vectors (biases, norm gains, layer scales, mask token) are not decayed.
    """
    groups: dict[tuple[float, float], list] = {}
    for name, p in named_params:
        if not p.requires_grad:
            continue
        scale = 1.0 if lr_scale is None else lr_scale(name)
        wd = 0.0 if p.ndim <= 1 else weight_decay
        groups.setdefault((scale, wd), []).append((name, p))
    return [{"lr_scale": s, "weight_decay": wd, "params": ps} for (s, wd), ps in groups.items()]


class AdamW:
    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, clip: float | None = None):
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.clip = clip
        self.step_count = 0
        self.state: dict = {}

    def params(self):
        for g in self.groups:
            for _, p in g["params"]:
                yield p

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def step(self, lr: float) -> float:
        """Clip (if configured) and update; returns the pre-clip gradient norm."""
        ps = [p for p in self.params() if p.grad is not None]
        norm = torch.nn.utils.clip_grad_norm_(ps, self.clip if self.clip else float("inf"))
        if not torch.isfinite(norm):
            raise NumericsError("non-finite gradient norm")
        self.step_count += 1
        for g in self.groups:
            plist = [p for _, p in g["params"]]
            adamw_step(plist, [p.grad for p in plist], self.state, lr * g["lr_scale"], self.betas,
                       g["weight_decay"], self.step_count, self.eps)
        return float(norm)

    def named_moments(self):
        for g in self.groups:
            for name, p in g["params"]:
                if id(p) in self.state:
                    m, v = self.state[id(p)]
                    yield f"opt.m.{name}", m
                    yield f"opt.v.{name}", v
