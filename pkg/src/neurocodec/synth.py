"""Synthetic EEG corpus, recording-level splits and shape-homogeneous batching."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import registry
from .eegio import EEGRecording
from .errors import ConfigError, SplitError
from .spectrum import band_power, dft, idft

DEFAULT_BANDS = ((4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 50.0))
# lateralized pairs: odd numbers sit on the left hemisphere, even on the right
MONTAGE = ("C3", "C4", "O1", "O2", "F3", "F4", "P3", "P4", "T7", "T8", "FP1", "FP2")

# band-power rule accuracy stays >= 0.99 below this white-noise level (volts)
RECOVERABLE_NOISE_STD = 5e-5


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 4
    channel_options: tuple[int, ...] = (4, 6)
    rate_hz: float = 200.0
    duration_s: float = 8.0
    bands: tuple[tuple[float, float], ...] = DEFAULT_BANDS
    n_recordings: int = 100
    tone_amp: float = 5e-5
    pink_std: float = 2e-6
    noise_std: float = 2e-6
    band_margin: float = 0.25  # tones are drawn from the central part of each band
    lateralized: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if len(self.bands) < self.n_classes:
            raise ConfigError(f"{self.n_classes} classes but only {len(self.bands)} bands")
        bands = sorted(self.bands[: self.n_classes])
        for (lo, hi), (lo2, _) in zip(bands, bands[1:]):
            if hi > lo2:
                raise ConfigError("class bands overlap")
        for lo, hi in bands:
            if not (0.1 < lo < hi < 75.0):
                raise ConfigError(f"band {lo}-{hi} Hz outside (0.1, 75)")
        if max(self.channel_options) > len(MONTAGE) or min(self.channel_options) < 1:
            raise ConfigError(f"channel counts must lie in [1, {len(MONTAGE)}]")
        if self.lateralized and any(c % 2 for c in self.channel_options):
            raise ConfigError("lateralized corpora need even channel counts")


def is_left(label: str) -> bool:
    digits = "".join(ch for ch in label if ch.isdigit())
    return bool(digits) and int(digits) % 2 == 1


def pink_noise(rng: np.random.Generator, C: int, T: int, rate: float, std: float) -> np.ndarray:
    """White noise shaped to a 1/f power spectrum (1/sqrt(f) amplitude), zero DC."""
    if std == 0:
        return np.zeros((C, T))
    spec = dft(rng.standard_normal((C, T)))
    m = np.arange(T)
    f = np.minimum(m, T - m) * rate / T
    shape = np.zeros(T)
    shape[f > 0] = 1.0 / np.sqrt(f[f > 0])
    x = idft(spec * shape).real
    return x * (std / x.std(axis=1, keepdims=True).clip(1e-30))


def _tone_freq(rng, band, margin):
    lo, hi = band
    pad = (hi - lo) * margin
    return rng.uniform(lo + pad, hi - pad)


def synth_recording(cfg: SynthConfig, index: int, label: int) -> EEGRecording:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, index])))
    C = int(rng.choice(cfg.channel_options))
    labels = list(MONTAGE[:C])
    T = int(round(cfg.duration_s * cfg.rate_hz))
    t = np.arange(T) / cfg.rate_hz
    f = _tone_freq(rng, cfg.bands[label], cfg.band_margin)
    phases = rng.uniform(0, 2 * np.pi, size=C)
    freqs = np.full(C, f)
    meta = {"id": f"rec{index:05d}", "label": str(label), "freq": f"{f:.4f}"}
    if cfg.lateralized:
        other = [c for c in range(cfg.n_classes) if c != label]
        distractor = int(rng.choice(other))
        f2 = _tone_freq(rng, cfg.bands[distractor], cfg.band_margin)
        freqs = np.array([f if is_left(name) else f2 for name in labels])
        meta["distractor"] = str(distractor)
    data = cfg.tone_amp * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])
    data = data + pink_noise(rng, C, T, cfg.rate_hz, cfg.pink_std)
    if cfg.noise_std:
        data = data + cfg.noise_std * rng.standard_normal((C, T))
    return EEGRecording(registry.lookup_all(labels), cfg.rate_hz, data.astype(np.float32), meta)


def synth_generate(cfg: SynthConfig) -> list[tuple[EEGRecording, int]]:
    """Labeled synthetic recordings; class counts differ by at most one."""
    labels = np.arange(cfg.n_recordings) % cfg.n_classes
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 2**31])))
    labels = rng.permutation(labels)
    return [(synth_recording(cfg, i, int(y)), int(y)) for i, y in enumerate(labels)]


def band_power_classify(rec: EEGRecording, cfg: SynthConfig) -> int:
    """Rule classifier: class band with the largest power on the signal-bearing channels."""
    rows = [i for i, ch in enumerate(rec.channels) if not cfg.lateralized or is_left(ch.name)]
    x = np.asarray(rec.data, dtype=np.float64)[rows]
    powers = [band_power(x, rec.rate_hz, lo, hi) for lo, hi in cfg.bands[: cfg.n_classes]]
    return int(np.argmax(powers))


@dataclass
class DatasetSplit:
    train: list[int] = field(default_factory=list)
    valid: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)

    def parts(self):
        return {"train": self.train, "valid": self.valid, "test": self.test}


def split(rec_ids, ratios, seed: int = 0) -> DatasetSplit:
    """Recording-level split of a sample list.

    ``rec_ids[i]`` is the recording sample ``i`` came from; ``ratios`` is
    (train, valid) or (train, valid, test) and must sum to 1.
    """
    ratios = tuple(float(r) for r in ratios) + (0.0,) * (3 - len(ratios))
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SplitError(f"ratios {ratios} must be nonnegative and sum to 1")
    recs = sorted(set(rec_ids))
    R = len(recs)
    buckets = [i for i, r in enumerate(ratios) if r > 0]
    if R < len(buckets):
        raise SplitError(f"{R} recordings cannot fill {len(buckets)} nonempty splits")
    raw = np.array(ratios) * R
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: R - counts.sum()]:
        counts[i] += 1
    for i in buckets:  # every nonzero bucket gets at least one recording
        if counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1
    rng = np.random.Generator(np.random.Philox(seed))
    order = [recs[i] for i in rng.permutation(R)]
    assign = {}
    start = 0
    for part, n in enumerate(counts):
        for r in order[start:start + n]:
            assign[r] = part
        start += n
    out = DatasetSplit()
    lists = (out.train, out.valid, out.test)
    for i, r in enumerate(rec_ids):
        lists[assign[r]].append(i)
    return out


def plan_batches(shape_keys, batch_size: int, seed: int = 0) -> list[list[int]]:
    """Batches of indices that never mix (C, patch-count) shapes; every index once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    groups = defaultdict(list)
    for i, key in enumerate(shape_keys):
        groups[tuple(key)].append(i)
    rng = np.random.Generator(np.random.Philox(seed))
    batches = []
    for key in sorted(groups):
        idx = np.array(groups[key])[rng.permutation(len(groups[key]))]
        batches += [idx[i:i + batch_size].tolist() for i in range(0, len(idx), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]
