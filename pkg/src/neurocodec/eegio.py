"""Recording container, preprocessing chain and patch segmentation.

EEGR layout (little-endian)::

    b"EEGR" | u16 version=1 | u16 n_channels | f64 rate_hz
    n_channels x (u8 len | ascii label)
    u32 meta_len | utf-8 "key=value\\n" lines
    payload: n_channels x T float32, row-major

The writer stores T in the reserved meta key ``samples`` so that a
truncated payload can be told apart from a short recording; the key is
stripped again on read.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import registry
from .errors import ConfigError, FormatError, ResampleError, SegmentError, SequenceLengthError
from .registry import ChannelLabel
from .spectrum import dft, idft

MAGIC = b"EEGR"
VERSION = 1
MAX_PATCHES = 256
_SAMPLES_KEY = "samples"


@dataclass
class EEGRecording:
    channels: list[ChannelLabel]
    rate_hz: float
    data: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 2:
            raise FormatError("recording data must be a C x T matrix")
        if len(self.channels) != self.data.shape[0]:
            raise FormatError(
                f"{len(self.channels)} channel labels for {self.data.shape[0]} data rows")
        if self.data.shape[1] < 1:
            raise FormatError("recording has no samples")
        if not self.rate_hz > 0:
            raise FormatError("sampling rate must be positive")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise FormatError("duplicate channel labels")

    @classmethod
    def from_labels(cls, labels, rate_hz, data, meta=None) -> "EEGRecording":
        return cls(registry.lookup_all(labels), float(rate_hz), np.asarray(data), dict(meta or {}))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def id(self) -> str:
        return self.meta.get("id", "")


def write_recording(path, rec: EEGRecording) -> None:
    meta = dict(rec.meta)
    meta[_SAMPLES_KEY] = str(rec.n_samples)
    meta_bytes = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<HHd", VERSION, rec.n_channels, rec.rate_hz)]
    for ch in rec.channels:
        raw = ch.name.encode("ascii")
        parts.append(struct.pack("<B", len(raw)) + raw)
    parts.append(struct.pack("<I", len(meta_bytes)) + meta_bytes)
    parts.append(np.ascontiguousarray(rec.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("unexpected end of file in header")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_meta(text: str) -> dict[str, str]:
    meta = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"malformed meta line {line!r}")
        k, v = line.split("=", 1)
        meta[k] = v
    return meta


def read_header(path) -> tuple[dict, int]:
    """Parse the header; returns (fields, payload offset)."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, n_ch, rate = r.unpack("<HHd")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    labels = []
    for _ in range(n_ch):
        (n,) = r.unpack("<B")
        try:
            labels.append(r.take(n).decode("ascii"))
        except UnicodeDecodeError:
            raise FormatError(f"{path}: non-ascii channel label") from None
    (meta_len,) = r.unpack("<I")
    try:
        meta = _parse_meta(r.take(meta_len).decode("utf-8"))
    except UnicodeDecodeError:
        raise FormatError(f"{path}: meta block is not utf-8") from None
    payload = len(buf) - r.pos
    if n_ch == 0 or payload % (4 * n_ch) or payload == 0:
        raise FormatError(f"{path}: payload of {payload} bytes does not fit {n_ch} channels")
    n_samples = payload // (4 * n_ch)
    declared = meta.pop(_SAMPLES_KEY, None)
    if declared is not None and int(declared) != n_samples:
        raise FormatError(f"{path}: header declares {declared} samples, payload holds {n_samples}")
    fields = {"version": version, "channels": n_ch, "rate_hz": rate, "labels": labels,
              "samples": n_samples, "meta": meta}
    return fields, r.pos


def read_recording(path) -> EEGRecording:
    fields, offset = read_header(path)
    chans = registry.lookup_all(fields["labels"])
    buf = Path(path).read_bytes()
    data = np.frombuffer(buf, dtype="<f4", offset=offset).reshape(fields["channels"], fields["samples"])
    return EEGRecording(chans, fields["rate_hz"], data.astype(np.float32), fields["meta"])


@dataclass(frozen=True)
class PreprocessConfig:
    lowcut: float = 0.1
    highcut: float = 75.0
    notch: float | None = 50.0
    notch_halfwidth: float = 0.5
    transition: float = 1.0
    target_rate: float = 200.0
    unit: float = 1e-4


def _raised_cosine(x: np.ndarray) -> np.ndarray:
    """0 at x<=0, 1 at x>=1, raised-cosine in between."""
    x = np.clip(x, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * x))


def filter_gain(freqs: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    tw = cfg.transition
    gain = np.ones_like(freqs)
    if cfg.lowcut > 0:
        tw_lo = min(tw, cfg.lowcut)
        gain *= _raised_cosine((freqs - (cfg.lowcut - tw_lo)) / tw_lo)
    gain *= _raised_cosine((cfg.highcut + tw - freqs) / tw)
    if cfg.notch is not None:
        dist = np.abs(freqs - cfg.notch)
        gain *= _raised_cosine((dist - cfg.notch_halfwidth) / tw)
    return gain


def _bin_freqs(T: int, rate: float) -> np.ndarray:
    m = np.arange(T)
    return np.minimum(m, T - m) * rate / T


def preprocess(rec: EEGRecording, cfg: PreprocessConfig = PreprocessConfig()) -> EEGRecording:
    """Band-pass, notch, resample and rescale to units of ``cfg.unit`` volts."""
    if cfg.lowcut >= cfg.highcut:
        raise ConfigError(f"band edges inverted: {cfg.lowcut} >= {cfg.highcut}")
    if cfg.target_rate > rec.rate_hz * (1 + 1e-12):
        raise ResampleError(f"cannot upsample {rec.rate_hz} Hz to {cfg.target_rate} Hz")
    x = np.asarray(rec.data, dtype=np.float64)
    T = x.shape[1]
    freqs = _bin_freqs(T, rec.rate_hz)
    spec = dft(x) * filter_gain(freqs, cfg)

    ratio = rec.rate_hz / cfg.target_rate
    if abs(ratio - 1.0) < 1e-12:
        y = idft(spec).real
    elif abs(ratio - round(ratio)) < 1e-9:
        spec = spec * (freqs < cfg.target_rate / 2)
        y = idft(spec).real[:, :: int(round(ratio))]
    else:
        T_new = max(1, int(round(T * cfg.target_rate / rec.rate_hz)))
        keep = (min(T, T_new) - 1) // 2  # positive bins strictly below both Nyquists
        out = np.zeros((x.shape[0], T_new), dtype=np.complex128)
        out[:, : keep + 1] = spec[:, : keep + 1]
        if keep:
            out[:, T_new - keep:] = spec[:, T - keep:]
        y = idft(out).real * (T_new / T)
    return EEGRecording(list(rec.channels), float(cfg.target_rate), y / cfg.unit, dict(rec.meta))


@dataclass
class Sample:
    channels: list[ChannelLabel]
    data: np.ndarray
    source: tuple[str, int] = ("", 0)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


def n_segments(T: int, t: int, s: int) -> int:
    return (T - t) // s + 1


def segment(rec: EEGRecording, t: int, s: int) -> list[Sample]:
    T = rec.n_samples
    if t < 1 or s < 1:
        raise SegmentError(f"window {t} and stride {s} must be >= 1")
    if t > T:
        raise SegmentError(f"window of {t} samples exceeds recording length {T}")
    return [Sample(list(rec.channels), rec.data[:, i * s: i * s + t], (rec.id, i * s))
            for i in range(n_segments(T, t, s))]


@dataclass
class PatchGrid:
    patches: np.ndarray  # (N, w), channel-major: patch j*n_times + (k-1)
    chan_idx: np.ndarray  # (N,) registry indices
    time_idx: np.ndarray  # (N,) 1-based time slots
    w: int
    n_channels: int
    n_times: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def shape_key(self) -> tuple[int, int]:
        return (self.n_channels, self.n_times)


def patchify(sample: Sample, w: int) -> PatchGrid:
    if w < 1:
        raise SegmentError("patch width must be >= 1")
    C, t = sample.data.shape
    n = t // w
    if n < 1:
        raise SegmentError(f"sample of {t} samples is shorter than one patch ({w})")
    if C * n > MAX_PATCHES:
        raise SequenceLengthError(f"{C} channels x {n} patches = {C * n} > {MAX_PATCHES}")
    patches = np.ascontiguousarray(sample.data[:, : n * w]).reshape(C * n, w)
    chan = np.repeat([c.registry_index for c in sample.channels], n).astype(np.int64)
    time = np.tile(np.arange(1, n + 1), C).astype(np.int64)
    return PatchGrid(patches, chan, time, w, C, n)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    return grid.patches.reshape(grid.n_channels, grid.n_times * grid.w)
