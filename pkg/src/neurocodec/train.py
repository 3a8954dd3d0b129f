"""Tokenizer and masked-modeling training loops."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import batches, eval_batches
from .optim import AdamW, cosine_lr, param_groups
from .pretrain import MEMModel, mem_accuracy, pretrain_step
from .tokenizer import Tokenizer, codebook_perplexity, ema_update, revive_dead_codes, tokenizer_forward_loss


@dataclass
class TokenizerTrainConfig:
    epochs: int = 100
    batch_size: int = 1024
    lr: float = 5e-5
    min_lr: float = 1e-5
    warmup_epochs: int = 10
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    clip: float | None = None
    reduction: str = "mean"
    seed: int = 0


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 512
    lr: float = 5e-4
    min_lr: float = 1e-5
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.98)
    clip: float | None = 3.0
    mask_ratio: float = 0.5
    symmetric: bool = True
    reduction: str = "mean"
    seed: int = 0


def _steps_per_epoch(items, batch_size):
    return len(list(batches(items, batch_size, 0)))


def train_tokenizer(model: Tokenizer, items, tcfg: TokenizerTrainConfig, log=None) -> list[dict]:
    """One row per epoch: epoch, L_T, amp_mse, phase_mse, commit, perplexity, lr."""
    dtype = next(model.parameters()).dtype
    opt = AdamW(param_groups(model.named_parameters(), weight_decay=tcfg.weight_decay),
                tcfg.betas, clip=tcfg.clip)
    spe = _steps_per_epoch(items, tcfg.batch_size)
    total, warm = tcfg.epochs * spe, tcfg.warmup_epochs * spe
    K = model.codebook.K
    rows, step = [], 0
    for epoch in range(1, tcfg.epochs + 1):
        model.train()
        acc = {"L_T": 0.0, "amp": 0.0, "phase": 0.0, "commit": 0.0}
        hist = np.zeros(K, dtype=np.int64)
        n_b = 0
        for b in batches(items, tcfg.batch_size, tcfg.seed * 100003 + epoch, dtype):
            lr = cosine_lr(step, total, warm, tcfg.lr, tcfg.min_lr)
            out, losses = tokenizer_forward_loss(model, b["x"], b["chan"], b["time"], b["amp"],
                                                 b["phase"], tcfg.reduction)
            opt.zero_grad()
            losses["loss"].backward()
            opt.step(lr)
            tok = out["tok"]
            if model.codebook.ema:
                ema_update(model.codebook, tok.indices, tok.encoder_reps.detach())
            else:
                model.codebook.usage_age.add_(1)
                model.codebook.usage_age[torch.unique(tok.indices)] = 0
            revive_dead_codes(model.codebook, tok.encoder_reps.detach())
            hist += np.bincount(tok.indices.reshape(-1).numpy(), minlength=K)
            for k in acc:
                acc[k] += float(losses[k])
            n_b += 1
            step += 1
        row = {"epoch": epoch, "L_T": acc["L_T"] / n_b, "amp_mse": acc["amp"] / n_b,
               "phase_mse": acc["phase"] / n_b, "commit": acc["commit"] / n_b,
               "perplexity": codebook_perplexity(hist), "lr": lr}
        rows.append(row)
        if log:
            log(row)
    model.eval()
    return rows


def pretrain(model: MEMModel, tokenizer: Tokenizer, items, pcfg: PretrainConfig, valid_items=None,
             log=None, on_epoch=None) -> list[dict]:
    """One row per epoch: epoch, loss (total), loss_mem, loss_sym, mem_accuracy, lr[, valid_mem_accuracy]."""
    dtype = next(model.parameters()).dtype
    tokenizer.eval()
    for p in tokenizer.parameters():
        p.requires_grad_(False)
    opt = AdamW(param_groups(model.named_parameters(), weight_decay=pcfg.weight_decay),
                pcfg.betas, clip=pcfg.clip)
    spe = _steps_per_epoch(items, pcfg.batch_size)
    total, warm = pcfg.epochs * spe, pcfg.warmup_epochs * spe
    valid_b = eval_batches(valid_items, pcfg.batch_size, dtype) if valid_items else None
    rows, step = [], 0
    for epoch in range(1, pcfg.epochs + 1):
        tot, lm, ls, accs = [], [], [], []
        for b in batches(items, pcfg.batch_size, pcfg.seed * 100003 + epoch, dtype):
            lr = cosine_lr(step, total, warm, pcfg.lr, pcfg.min_lr)
            r = pretrain_step(model, tokenizer, b, opt, lr, mask_ratio=pcfg.mask_ratio,
                              symmetric=pcfg.symmetric, seed=pcfg.seed, step=step,
                              reduction=pcfg.reduction)
            tot.append(r.total)
            lm.append(r.loss)
            ls.append(r.loss_sym)
            accs.append(r.mem_accuracy)
            step += 1
        row = {"epoch": epoch, "loss": float(np.mean(tot)), "loss_mem": float(np.mean(lm)),
               "loss_sym": float(np.mean(ls)), "mem_accuracy": float(np.mean(accs)), "lr": lr}
        if valid_b is not None:
            row["valid_mem_accuracy"] = mem_accuracy(model, tokenizer, valid_b, pcfg.mask_ratio,
                                                     seed=pcfg.seed + 1)
        rows.append(row)
        if log:
            log(row)
        if on_epoch:
            on_epoch(epoch, opt)
    model.eval()
    return rows
