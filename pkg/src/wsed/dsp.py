"""Audio loading and log-mel feature extraction."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile


class AudioError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray  # (N,) mono or (N, channels), float32 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("samples must be finite")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    duration: float = 10.0
    window: int = 1024
    overlap: int = 360
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None  # None -> Nyquist
    log_floor: float = 1e-10

    @property
    def hop(self) -> int:
        return self.window - self.overlap

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window:
            return 0
        return (n_samples - self.window) // self.hop + 1


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # (T, F)
    frame_hop: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def frame_seconds(self) -> float:
        return self.frame_hop / self.sample_rate


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    fmin: float
    fmax: float
    centers: np.ndarray  # band center frequencies in Hz


def read_wav(path) -> AudioClip:
    """Read PCM (8/16/24/32-bit int) or 32/64-bit float WAV, any channel count."""
    sr, data = wavfile.read(path)
    if data.dtype == np.uint8:
        samples = (data.astype(np.float32) - 128.0) / 128.0
    elif data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        samples = (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float32)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    return AudioClip(samples, int(sr))


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(path, clip.sample_rate, pcm)


def to_mono_16k(clip: AudioClip, target_rate: int = 16000) -> AudioClip:
    x = clip.samples
    if x.size == 0:
        raise AudioError("empty clip")
    if x.ndim == 2:
        x = x.mean(axis=1, dtype=np.float64).astype(np.float32)
    if clip.sample_rate == target_rate:
        return AudioClip(x.copy(), target_rate)
    n_out = int(round(x.shape[0] * target_rate / clip.sample_rate))
    t_out = np.arange(n_out) * (clip.sample_rate / target_rate)
    y = np.interp(t_out, np.arange(x.shape[0]), x.astype(np.float64))
    return AudioClip(y.astype(np.float32), target_rate)


def pad_or_truncate(clip: AudioClip, target_seconds: float) -> AudioClip:
    if target_seconds <= 0:
        raise AudioError("target_seconds must be positive")
    n = int(round(target_seconds * clip.sample_rate))
    x = clip.samples
    if x.shape[0] >= n:
        return AudioClip(x[:n].copy(), clip.sample_rate)
    pad = [(0, n - x.shape[0])] + [(0, 0)] * (x.ndim - 1)
    return AudioClip(np.pad(x, pad), clip.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Triangular filters with unit peak, equally spaced on the HTK mel scale."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = weights.sum(axis=1) == 0
    if np.any(empty):
        # narrow low bands can miss every FFT bin; give them the nearest bin
        nearest = np.abs(freqs[None, :] - mid[empty]).argmin(axis=1)
        weights[np.flatnonzero(empty), nearest] = 1.0
    return MelFilterbank(weights, fmin, fmax, edges[1:-1].copy())


def featurize(clip: AudioClip, config: FeatureConfig | None = None) -> LogMelSpectrogram:
    """Log mel magnitudes from a mono clip at ``config.sample_rate``.

    Frames lie fully inside the signal (no centering), so a 160000-sample
    clip with the default window 1024 / hop 664 yields 240 frames.
    """
    config = config or FeatureConfig()
    x = clip.samples
    if x.ndim != 1 or clip.sample_rate != config.sample_rate:
        raise AudioError("featurize expects a mono clip at the configured sample rate")
    n = config.n_frames(x.shape[0])
    if n == 0:
        raise AudioError("clip too short")
    frames = np.lib.stride_tricks.sliding_window_view(
        x.astype(np.float64), config.window)[::config.hop][:n]
    window = np.hamming(config.window)
    mag = np.abs(np.fft.rfft(frames * window, axis=1))
    fb = _cached_filterbank(config)
    mel = mag @ fb.weights.T
    values = np.log(mel + config.log_floor).astype(np.float32)
    return LogMelSpectrogram(values, config.hop, config.sample_rate)


_FB_CACHE: dict[tuple, MelFilterbank] = {}


def _cached_filterbank(config: FeatureConfig) -> MelFilterbank:
    key = (config.sample_rate, config.window, config.n_mels, config.fmin, config.fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(config.sample_rate, config.window,
                                        config.n_mels, config.fmin, config.fmax)
    return _FB_CACHE[key]


def load_clip_features(path, config: FeatureConfig | None = None) -> LogMelSpectrogram:
    """Full chain for one WAV file: mono/16 kHz, pad, featurize."""
    config = config or FeatureConfig()
    clip = to_mono_16k(read_wav(path), config.sample_rate)
    clip = pad_or_truncate(clip, config.duration)
    return featurize(clip, config)


# ---------------------------------------------------------------- feature cache

CACHE_MAGIC = b"WSED"
CACHE_VERSION = 1


def save_features(path, spec: LogMelSpectrogram) -> None:
    t, f = spec.values.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, t, f))
        fh.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def load_features(path, frame_hop: int = 664, sample_rate: int = 16000) -> LogMelSpectrogram:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CACHE_MAGIC:
        raise AudioError(f"{path}: not a feature cache (bad magic)")
    version, t, f = struct.unpack_from("<III", buf, 4)
    if version != CACHE_VERSION:
        raise AudioError(f"{path}: unsupported feature cache version {version}")
    values = np.frombuffer(buf, dtype="<f4", count=t * f, offset=16).reshape(t, f)
    return LogMelSpectrogram(values.astype(np.float32), frame_hop, sample_rate)
