"""Waveform to normalized log-mel features.

16 kHz mono audio, 2048-sample periodic Hann frames every 160 samples
(centered, reflect padding) so a 10 s clip gives 1001 frames, 2048-point
power spectrum, 128 HTK-mel triangles over 0-8 kHz, natural log with a
1e-10 floor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ConfigError, FormatError, InputError

SAMPLE_RATE = 16000
CLIP_SAMPLES = 160000
N_FFT = 2048
HOP = 160
N_MELS = 128
LOG_FLOOR = 1e-10
FRAMES = CLIP_SAMPLES // HOP + 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate not in (44100, 16000):
            raise ConfigError(f"unsupported sample rate {self.sample_rate} (44100 or 16000)")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read 16-bit PCM or 32-bit float RIFF; multichannel input is averaged."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return Waveform(x, int(rate))


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono 16-bit PCM, clipping to [-1, 1]."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    wavfile.write(path, sample_rate, np.round(x * 32767.0).astype("<i2"))


# ---------------------------------------------------------------------------
# resampling, framing, mel analysis
# ---------------------------------------------------------------------------


def resample(w: Waveform, target: int = SAMPLE_RATE) -> Waveform:
    if target != SAMPLE_RATE:
        raise ConfigError(f"only {SAMPLE_RATE} Hz output is supported")
    if w.sample_rate == target:
        return w
    n_out = int(round(len(w.samples) * target / w.sample_rate))
    # 44100 -> 16000 is the rational factor 160/441
    y = resample_poly(w.samples, 160, 441)
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return Waveform(y[:n_out], target)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """``(n_mels, n_fft // 2 + 1)`` triangles with unit peak at each center."""
    fmax = sample_rate / 2 if fmax is None else fmax
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_FB_CACHE: dict = {}


def power_spectrogram(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """``(frames, n_fft // 2 + 1)`` power spectrum of centered, reflect-padded frames."""
    padded = np.pad(x, (n_fft // 2, n_fft // 2), mode="reflect")
    frames = sliding_window_view(padded, n_fft)[::hop]
    spec = np.fft.rfft(frames * hann_periodic(n_fft), axis=1)
    return spec.real**2 + spec.imag**2


def log_mel(w: Waveform) -> np.ndarray:
    """Unnormalized ``(1001, 128)`` log-mel matrix of a 16 kHz clip.

    Inputs are zero-padded or truncated to 10 s first.
    """
    if len(w.samples) == 0:
        raise InputError("empty waveform")
    if w.sample_rate != SAMPLE_RATE:
        w = resample(w)
    x = w.samples[:CLIP_SAMPLES]
    if len(x) < CLIP_SAMPLES:
        x = np.pad(x, (0, CLIP_SAMPLES - len(x)))
    fb = _FB_CACHE.get("fb")
    if fb is None:
        fb = _FB_CACHE["fb"] = mel_filterbank()
    return np.log(power_spectrogram(x) @ fb.T + LOG_FLOOR)


# ---------------------------------------------------------------------------
# corpus normalization
# ---------------------------------------------------------------------------


@dataclass
class CorpusStats:
    mean: np.ndarray | float
    std: np.ndarray | float
    clip_count: int
    per_band: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "mean": np.asarray(self.mean).tolist(),
                "std": np.asarray(self.std).tolist(),
                "clip_count": self.clip_count,
                "per_band": self.per_band,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> CorpusStats:
        d = json.loads(text)
        conv = (lambda v: np.asarray(v)) if d["per_band"] else float
        return cls(conv(d["mean"]), conv(d["std"]), int(d["clip_count"]), bool(d["per_band"]))


class StatsAccumulator:
    """Mergeable running mean/variance over feature cells (Chan's update)."""

    def __init__(self, per_band: bool = False):
        self.per_band = per_band
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.clips = 0

    def add(self, feature: np.ndarray) -> StatsAccumulator:
        f = np.asarray(feature, dtype=np.float64)
        other = StatsAccumulator(self.per_band)
        if self.per_band:
            other.n = f.shape[0]
            other.mean = f.mean(axis=0)
            other.m2 = ((f - other.mean) ** 2).sum(axis=0)
        else:
            other.n = f.size
            other.mean = float(f.mean())
            other.m2 = float(((f - other.mean) ** 2).sum())
        other.clips = 1
        return self.merge(other)

    def merge(self, other: StatsAccumulator) -> StatsAccumulator:
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2, self.clips = other.n, other.mean, other.m2, other.clips
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = self.mean + delta * other.n / n
        self.m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        self.n = n
        self.clips += other.clips
        return self

    def stats(self) -> CorpusStats:
        if self.n == 0:
            raise InputError("no features accumulated")
        std = np.sqrt(self.m2 / self.n)
        return CorpusStats(self.mean, std, self.clips, self.per_band)


def corpus_stats(features, per_band: bool = False) -> CorpusStats:
    acc = StatsAccumulator(per_band)
    for f in features:
        acc.add(f)
    return acc.stats()


def normalize(feature: np.ndarray, stats: CorpusStats) -> np.ndarray:
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        raise InputError("degenerate corpus: feature standard deviation is zero")
    return (np.asarray(feature, dtype=np.float64) - stats.mean) / std


# ---------------------------------------------------------------------------
# feature cache files
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"LMEL"


def write_feature(path, values: np.ndarray) -> None:
    v = np.asarray(values)
    if v.ndim != 2:
        raise FormatError(f"feature must be 2-D, got shape {v.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", v.shape[0], v.shape[1]))
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_feature(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file (magic {raw[:4]!r})")
    frames, bands = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != frames * bands * 4:
        raise FormatError(f"{path}: expected {frames}x{bands} floats, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(frames, bands).astype(np.float64)


def featurize_file(path) -> np.ndarray:
    return log_mel(resample(read_wav(path)))
