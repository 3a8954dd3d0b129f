"""Central finite-difference verification of autograd gradients."""
from __future__ import annotations

import numpy as np
import torch

from .errors import NumericsError


def _scalar(loss_fn) -> float:
    with torch.no_grad():
        val = loss_fn()
    val = float(val)
    if not np.isfinite(val):
        raise NumericsError("loss is not finite")
    return val


def grad_check(loss_fn, params, eps: float = 1e-6, n_coords: int = 200, seed: int = 0,
               return_details: bool = False):
    """Max relative error between autograd and central differences.

    ``loss_fn`` takes no arguments and returns a scalar tensor built from
    ``params``. ``n_coords`` coordinates are drawn uniformly over all
    parameter entries (all of them if there are fewer). The relative error
    uses the denominator max(|analytic|, |numeric|, 1e-8).
    """
    params = [p for p in params]
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("grad_check requires float64 parameters")
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericsError("loss is not finite")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    details = []
    for f in np.sort(flat):
        which = int(np.searchsorted(offsets, f, side="right") - 1)
        idx = int(f - offsets[which])
        p = params[which]
        view = p.data.view(-1)
        orig = view[idx].item()
        view[idx] = orig + eps
        plus = _scalar(loss_fn)
        view[idx] = orig - eps
        minus = _scalar(loss_fn)
        view[idx] = orig
        numeric = (plus - minus) / (2 * eps)
        analytic = grads[which].view(-1)[idx].item()
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
        details.append((which, idx, analytic, numeric, err))
    return (worst, details) if return_details else worst
