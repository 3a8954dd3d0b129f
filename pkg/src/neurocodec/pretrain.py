"""Masked EEG modeling with symmetric masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import MaskError
from .model import NeuralTransformer, trunc_normal_


@dataclass(frozen=True)
class MaskSpec:
    bits: np.ndarray
    ratio: float
    seed: int

    @property
    def count(self) -> int:
        return int(self.bits.sum())


def mask_count(N: int, r: float) -> int:
    return max(1, int(np.floor(r * N)))


def generate_mask(N: int, r: float, seed: int) -> MaskSpec:
    """Exactly max(1, floor(r*N)) positions, uniform without replacement (Philox stream)."""
    if N < 1 or not 0 < r < 1:
        raise ValueError(f"need N >= 1 and 0 < r < 1, got N={N}, r={r}")
    rng = np.random.Generator(np.random.Philox(key=seed & (2**64 - 1)))
    bits = np.zeros(N, dtype=bool)
    bits[rng.permutation(N)[: mask_count(N, r)]] = True
    return MaskSpec(bits, r, seed)


def invert_mask(m: MaskSpec) -> MaskSpec:
    return MaskSpec(~m.bits, 1.0 - m.ratio, m.seed)


def batch_masks(B: int, N: int, r: float, seed: int, step: int) -> torch.Tensor:
    seeds = np.random.SeedSequence([seed, step]).generate_state(B, dtype=np.uint64)
    return torch.from_numpy(np.stack([generate_mask(N, r, int(s)).bits for s in seeds]))


class MEMModel(nn.Module):
    """Backbone with mask token plus the linear token classifier."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = NeuralTransformer(cfg.replace(mask_token=True))
        self.lm_head = nn.Linear(cfg.hidden_d, cfg.codebook_size)
        trunc_normal_(self.lm_head.weight)
        nn.init.zeros_(self.lm_head.bias)

    def forward(self, x, chan, time, mask=None):
        return self.lm_head(self.backbone(x, chan, time, mask))


def mem_loss(model: MEMModel, x, chan, time, mask: torch.Tensor, targets: torch.Tensor,
             reduction: str = "mean"):
    """Cross-entropy over masked positions; returns (loss, accuracy, n_masked)."""
    n = int(mask.sum())
    if n == 0:
        raise MaskError("mask selects no positions")
    logits = model(x, chan, time, mask)[mask]
    tgt = targets[mask]
    nll = -F.log_softmax(logits, dim=-1).gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    loss = nll.mean() if reduction == "mean" else nll.sum()
    acc = (logits.argmax(-1) == tgt).double().mean().item()
    return loss, acc, n


@dataclass
class PretrainBatchResult:
    loss: float
    loss_sym: float
    mem_accuracy: float
    total: float = 0.0
    grad_norm: float = 0.0


def pretrain_step(model: MEMModel, tokenizer, batch, opt, lr: float, *, mask_ratio=0.5,
                  symmetric=True, seed=0, step=0, reduction="mean") -> PretrainBatchResult:
    x, chan, time = batch["x"], batch["chan"], batch["time"]
    targets = tokenizer.get_indices(x, chan, time)  # shared by both passes
    B, N = targets.shape
    mask = batch_masks(B, N, mask_ratio, seed, step)
    model.train()
    loss, acc, n = mem_loss(model, x, chan, time, mask, targets, reduction)
    total = loss
    loss_sym, correct, count = 0.0, acc * n, n
    if symmetric:
        l_sym, acc_sym, n_sym = mem_loss(model, x, chan, time, ~mask, targets, reduction)
        total = loss + l_sym
        loss_sym = l_sym.item()
        correct += acc_sym * n_sym
        count += n_sym
    opt.zero_grad()
    total.backward()
    gn = opt.step(lr)
    return PretrainBatchResult(loss.item(), loss_sym, correct / count, total.item(), gn)


@torch.no_grad()
def mem_accuracy(model: MEMModel, tokenizer, batches, mask_ratio=0.5, seed=0) -> float:
    """Held-out accuracy over masked positions with a fixed mask schedule."""
    model.eval()
    correct = total = 0
    for i, batch in enumerate(batches):
        x, chan, time = batch["x"], batch["chan"], batch["time"]
        targets = tokenizer.get_indices(x, chan, time)
        mask = batch_masks(x.shape[0], x.shape[1], mask_ratio, seed, i)
        pred = model(x, chan, time, mask).argmax(-1)
        correct += int((pred[mask] == targets[mask]).sum())
        total += int(mask.sum())
    return correct / max(total, 1)
