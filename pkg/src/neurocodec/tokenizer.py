"""Vector-quantized neural spectrum tokenizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import NumericsError
from .model import Block, NeuralTransformer, PositionEmbedding, init_weights, trunc_normal_

NORM_EPS = 1e-12


def l2norm(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


@dataclass
class TokenizedSample:
    indices: torch.Tensor  # (..., N) long
    quantized: torch.Tensor  # (..., N, D) selected codebook vectors
    encoder_reps: torch.Tensor  # (..., N, D) l2-normalized p_i
    zero_norm: torch.Tensor  # (..., N) bool, rep norm fell under the clamp


class Codebook(nn.Module):
    """K unit-norm code vectors with EMA accumulators and usage ages.

    With ``ema=True`` the vectors are a buffer maintained by
    ``ema_update``; otherwise they are a trainable parameter.
    """

    def __init__(self, K: int, D: int, decay: float = 0.99, ema: bool = True,
                 dead_code_steps: int = 256, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        init = l2norm(torch.randn(K, D, generator=g, dtype=torch.float64)).float()
        if ema:
            self.register_buffer("vectors", init)
        else:
            self.vectors = nn.Parameter(init)
        self.register_buffer("ema_counts", torch.zeros(K))
        self.register_buffer("ema_sums", torch.zeros(K, D))
        self.register_buffer("usage_age", torch.zeros(K, dtype=torch.long))
        self.ema = ema
        self.decay = decay
        self.dead_code_steps = dead_code_steps
        self._gen = torch.Generator().manual_seed(seed + 1)

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    def normalized(self) -> torch.Tensor:
        return self.vectors if self.ema else l2norm(self.vectors)

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        return F.embedding(indices, self.normalized())


def quantize(reps: torch.Tensor, codebook) -> TokenizedSample:
    """Nearest code under l2-normalized Euclidean distance; ties go to the lowest index."""
    vectors = codebook.normalized() if isinstance(codebook, Codebook) else l2norm(codebook)
    norms = reps.norm(dim=-1)
    p = l2norm(reps)
    with torch.no_grad():
        # for unit vectors argmin distance == argmax dot; argmax returns the first maximum
        idx = (p.detach() @ vectors.detach().T).argmax(dim=-1)
    return TokenizedSample(idx, F.embedding(idx, vectors), p, norms < NORM_EPS)


@torch.no_grad()
def ema_update(codebook: Codebook, indices: torch.Tensor, reps: torch.Tensor) -> None:
    """EMA codebook step from assignments (indices, l2-normalized reps)."""
    K = codebook.K
    idx = indices.reshape(-1)
    reps = reps.reshape(-1, reps.shape[-1]).to(codebook.ema_sums.dtype)
    counts = torch.bincount(idx, minlength=K).to(codebook.ema_counts.dtype)
    sums = torch.zeros_like(codebook.ema_sums).index_add_(0, idx, reps)
    g = codebook.decay
    codebook.ema_counts.mul_(g).add_(counts, alpha=1 - g)
    codebook.ema_sums.mul_(g).add_(sums, alpha=1 - g)
    used = counts > 0
    if used.any():
        means = codebook.ema_sums[used] / codebook.ema_counts[used].clamp_min(1e-12).unsqueeze(1)
        codebook.vectors.data[used] = l2norm(means).to(codebook.vectors.dtype)
    codebook.usage_age.add_(1)
    codebook.usage_age[used] = 0


@torch.no_grad()
def revive_dead_codes(codebook: Codebook, reps: torch.Tensor) -> int:
    """Reset codes idle for more than ``dead_code_steps`` to random batch reps."""
    dead = torch.nonzero(codebook.usage_age > codebook.dead_code_steps).flatten()
    if dead.numel() == 0:
        return 0
    pool = reps.reshape(-1, reps.shape[-1])
    pick = torch.randint(pool.shape[0], (dead.numel(),), generator=codebook._gen)
    codebook.vectors.data[dead] = l2norm(pool[pick]).to(codebook.vectors.dtype)
    codebook.ema_sums[dead] = 0
    codebook.ema_counts[dead] = 0
    codebook.usage_age[dead] = 0
    return int(dead.numel())


def codebook_perplexity(hist) -> float:
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    if total < 1:
        raise ValueError("histogram is empty")
    q = hist[hist > 0] / total
    return float(np.exp(-np.sum(q * np.log(q))))


def _head(d: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, d), nn.Tanh(), nn.Linear(d, n_out))


class SpectrumDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_d
        self.inp = nn.Linear(cfg.codebook_dim, d)
        self.pos = PositionEmbedding(cfg.replace(use_spatial=True), d)
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_d, cfg.layer_scale_init, cfg.ln_eps)
            for _ in range(cfg.decoder_layers))
        self.norm = nn.LayerNorm(d, eps=cfg.ln_eps)
        self.amp_head = _head(d, cfg.n_bins)
        self.phase_head = _head(d, cfg.n_bins)
        init_weights(self)
        for t in (self.pos.time_embed, self.pos.spatial_embed):
            trunc_normal_(t.data)

    def forward(self, z, chan, time):
        h = self.pos(self.inp(z), chan, time)
        for blk in self.blocks:
            h = blk(h)
        h = self.norm(h)
        return self.amp_head(h), self.phase_head(h)


class Tokenizer(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.encoder = NeuralTransformer(cfg.replace(mask_token=False))
        self.to_code = nn.Linear(cfg.hidden_d, cfg.codebook_dim, bias=False)
        trunc_normal_(self.to_code.weight)
        self.codebook = Codebook(cfg.codebook_size, cfg.codebook_dim, cfg.ema_decay, cfg.ema,
                                 cfg.dead_code_steps, seed)
        self.decoder = SpectrumDecoder(cfg)
        self.samples_encoded = 0  # call counter: samples passed through the encoder

    def encode(self, x, chan, time) -> torch.Tensor:
        self.samples_encoded += x.shape[0]
        return self.to_code(self.encoder(x, chan, time))

    def forward(self, x, chan, time, quantizer: bool = True, frozen: dict | None = None):
        """Returns a dict with o_amp, o_phase and the TokenizedSample under ``tok``.

        ``quantizer=False`` feeds l2(p) straight to the decoder (autoencoder
        debug path). ``frozen`` (from a previous call's ``tok``) pins the
        code assignment and the straight-through shift so the stop-gradient
        semantics can be checked against finite differences.
        """
        p = self.encode(x, chan, time)
        if frozen is not None:
            tok = frozen["tok"]
            p_n = l2norm(p)
            q = self.codebook.lookup(tok.indices)
            z = p_n + frozen["shift"]
            tok = TokenizedSample(tok.indices, q, p_n, tok.zero_norm)
        elif quantizer:
            tok = quantize(p, self.codebook)
            z = tok.encoder_reps + (tok.quantized - tok.encoder_reps).detach()
        else:
            tok = quantize(p, self.codebook)
            z = tok.encoder_reps
        o_amp, o_phase = self.decoder(z, chan, time)
        return {"o_amp": o_amp, "o_phase": o_phase, "tok": tok,
                "shift": (tok.quantized - tok.encoder_reps).detach()}

    @torch.no_grad()
    def get_indices(self, x, chan, time) -> torch.Tensor:
        return quantize(self.encode(x, chan, time), self.codebook).indices


def tokenizer_loss(o_amp, o_phase, amp, phase, p_n, q, p_sg=None, q_sg=None,
                   ema: bool = True, reduction: str = "mean") -> dict:
    """Spectrum regression + codebook + commitment terms.

    ``p_sg`` / ``q_sg`` are the stop-gradient copies; they default to
    detached ``p_n`` / ``q``. The codebook-pull term is always reported;
    under EMA it is left out of ``loss`` (the EMA update plays its role).

    reduction="sum" is the literal per-patch sum over the dataset;
    "mean" turns every term into a mean squared error over its elements
    (patches x bins, patches x D).
    """
    p_sg = p_n.detach() if p_sg is None else p_sg
    q_sg = q.detach() if q_sg is None else q_sg
    amp_err = ((o_amp - amp) ** 2).sum(-1)
    phase_err = ((o_phase - phase) ** 2).sum(-1)
    pull = ((p_sg - q) ** 2).sum(-1)
    commit = ((p_n - q_sg) ** 2).sum(-1)
    if reduction == "sum":
        parts = [t.sum() for t in (amp_err, phase_err, pull, commit)]
    elif reduction == "mean":
        nb, D = o_amp.shape[-1], p_n.shape[-1]
        parts = [amp_err.mean() / nb, phase_err.mean() / nb, pull.mean() / D, commit.mean() / D]
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    amp_l, phase_l, pull_l, commit_l = parts
    total = amp_l + phase_l + pull_l + commit_l
    if not torch.isfinite(total):
        raise NumericsError("tokenizer loss is not finite")
    loss = amp_l + phase_l + commit_l + (0.0 if ema else pull_l)
    return {"loss": loss, "L_T": total.detach(), "amp": amp_l.detach(), "phase": phase_l.detach(),
            "pull": pull_l.detach(), "commit": commit_l.detach()}


def tokenizer_forward_loss(model: Tokenizer, x, chan, time, amp, phase, reduction="mean",
                           frozen=None, quantizer=True):
    out = model(x, chan, time, quantizer=quantizer, frozen=frozen)
    tok = out["tok"]
    kw = {}
    if frozen is not None:
        kw = {"p_sg": frozen["tok"].encoder_reps.detach(), "q_sg": frozen["tok"].quantized.detach()}
    losses = tokenizer_loss(out["o_amp"], out["o_phase"], amp, phase, tok.encoder_reps,
                            tok.quantized, ema=model.codebook.ema, reduction=reduction, **kw)
    return out, losses
