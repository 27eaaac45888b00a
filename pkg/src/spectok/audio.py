"""Waveform IO and the log-mel spectrogram frontend.

Audio is mono float64 internally. The frontend is plain numpy: non-centered
STFT with a periodic Hann window, a hand-built mel filterbank (HTK scale,
peak-1 triangles), log compression with a 1e-5 floor offset, per-instance
standardization, then pad/crop to a fixed frame count. Standardization runs
on the native-length spectrogram before any padding or cropping, so padded
zeros are exactly the (standardized) mean and cropping never changes the
statistics it was computed from.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

LOG_OFFSET = 1e-5
STD_FLOOR = 1e-8

_PCM16_SCALE = 32768.0
_PCM32_SCALE = 2147483648.0


@dataclass
class AudioBuffer:
    """Mono waveform with its sample rate. Samples are float64 in [-1, 1]-ish."""

    samples: np.ndarray
    sample_rate: int
    source_path: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-d samples, got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise ValueError(f"non-finite samples in {self.source_path or 'buffer'}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = 16000
    n_fft: int = 2048
    win_length: int = 2048
    hop_length: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None
    target_frames: int = 128

    def __post_init__(self):
        if min(self.sample_rate, self.n_fft, self.win_length, self.hop_length) <= 0:
            raise ValueError("sample_rate, n_fft, win_length and hop_length must be positive")
        if self.win_length > self.n_fft:
            raise ValueError(f"win_length {self.win_length} exceeds n_fft {self.n_fft}")
        if self.n_mels <= 0:
            raise ValueError(f"n_mels must be positive, got {self.n_mels}")
        if self.target_frames <= 0:
            raise ValueError(f"target_frames must be positive, got {self.target_frames}")
        nyquist = self.sample_rate / 2.0
        fmax = nyquist if self.fmax is None else self.fmax
        if self.fmin < 0:
            raise ValueError(f"fmin must be non-negative, got {self.fmin}")
        if fmax > nyquist:
            raise ValueError(f"fmax {fmax} above Nyquist {nyquist}")
        if self.fmin >= fmax:
            raise ValueError(f"fmin {self.fmin} must be below fmax {fmax}")

    @property
    def effective_fmax(self) -> float:
        return self.sample_rate / 2.0 if self.fmax is None else self.fmax


@dataclass
class MelSpectrogram:
    """Standardized log-mel features shaped (n_mels, target_frames), float32."""

    values: np.ndarray
    config: SpectrogramConfig
    source_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        expected = (self.config.n_mels, self.config.target_frames)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")
        if not np.isfinite(self.values).all():
            raise ValueError(f"non-finite spectrogram values for {self.source_id or 'input'}")


def read_wav(path: str | Path) -> AudioBuffer:
    """Read a WAV file as mono float64. PCM is scaled to [-1, 1); stereo is averaged."""
    path = Path(path)
    rate, data = wavfile.read(path)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / _PCM16_SCALE
    elif data.dtype == np.int32:
        # scipy widens 24-bit PCM into the top 3 bytes of int32, so one scale covers both
        samples = data.astype(np.float64) / _PCM32_SCALE
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype} in {path}")
    return AudioBuffer(samples=samples, sample_rate=int(rate), source_path=str(path))


def write_wav(path: str | Path, audio: AudioBuffer, fmt: str = "pcm16") -> None:
    """Write a mono WAV file. fmt is 'pcm16' or 'float32'."""
    path = Path(path)
    if fmt == "pcm16":
        clipped = np.clip(audio.samples, -1.0, 32767.0 / _PCM16_SCALE)
        data = np.round(clipped * _PCM16_SCALE).astype(np.int16)
    elif fmt == "float32":
        data = audio.samples.astype(np.float32)
    else:
        raise ValueError(f"unsupported WAV format {fmt!r}")
    wavfile.write(path, audio.sample_rate, data)


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Polyphase resample to target_rate. A no-op (bitwise) when rates already match."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if audio.sample_rate == target_rate:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate, audio.source_path)
    g = np.gcd(audio.sample_rate, target_rate)
    up, down = target_rate // g, audio.sample_rate // g
    out = resample_poly(audio.samples, up, down)
    return AudioBuffer(out, target_rate, audio.source_path)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: SpectrogramConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft // 2 + 1), peak height 1."""
    n_freqs = config.n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, config.sample_rate / 2.0, n_freqs)
    mel_pts = np.linspace(
        hz_to_mel(config.fmin), hz_to_mel(config.effective_fmax), config.n_mels + 2
    )
    hz_pts = mel_to_hz(mel_pts)
    bank = np.zeros((config.n_mels, n_freqs), dtype=np.float64)
    for m in range(config.n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        left = (fft_freqs - lo) / max(center - lo, 1e-12)
        right = (hi - fft_freqs) / max(hi - center, 1e-12)
        bank[m] = np.maximum(0.0, np.minimum(left, right))
    return bank


def stft_frame_count(n_samples: int, config: SpectrogramConfig) -> int:
    """Frames of a non-centered STFT; short signals are padded to one full window."""
    usable = max(n_samples, config.win_length)
    return 1 + (usable - config.win_length) // config.hop_length


def stft_magnitude(samples: np.ndarray, config: SpectrogramConfig) -> np.ndarray:
    """Magnitude STFT, shape (n_fft // 2 + 1, frames). No centering, periodic Hann."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or len(samples) == 0:
        raise ValueError("stft_magnitude expects a non-empty 1-d signal")
    if len(samples) < config.win_length:
        samples = np.pad(samples, (0, config.win_length - len(samples)))
    n_frames = stft_frame_count(len(samples), config)
    window = get_window("hann", config.win_length, fftbins=True)
    idx = np.arange(config.win_length)[None, :] + config.hop_length * np.arange(n_frames)[:, None]
    frames = samples[idx] * window[None, :]
    spec = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1))
    return spec.T


def fit_frames(
    values: np.ndarray,
    target_frames: int,
    mode: str,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Pad or crop along the frame axis to exactly target_frames.

    train mode: padding is split at a random offset, crops start at a random
    offset (both need rng). eval mode: right-pad, center crop with the start
    index rounded down.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n_frames = values.shape[1]
    if n_frames == target_frames:
        return values
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng for random pad/crop offsets")
    if n_frames < target_frames:
        pad = target_frames - n_frames
        left = int(rng.integers(0, pad + 1)) if mode == "train" else 0
        return np.pad(values, ((0, 0), (left, pad - left)))
    extra = n_frames - target_frames
    start = int(rng.integers(0, extra + 1)) if mode == "train" else extra // 2
    return values[:, start : start + target_frames]


def standardize(values: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance per spectrogram, std floored at STD_FLOOR."""
    mean = values.mean()
    std = max(float(values.std()), STD_FLOOR)
    return (values - mean) / std


def compute_mel(
    audio: AudioBuffer,
    config: SpectrogramConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> MelSpectrogram:
    """Full frontend: STFT -> mel -> log -> standardize -> pad/crop to target_frames."""
    if audio.sample_rate != config.sample_rate:
        raise ValueError(
            f"audio at {audio.sample_rate} Hz does not match config {config.sample_rate} Hz;"
            " resample first"
        )
    if len(audio.samples) == 0:
        raise ValueError(f"empty signal from {audio.source_path or 'buffer'}")
    spec = stft_magnitude(audio.samples, config)
    mel = mel_filterbank(config) @ spec
    logmel = np.log(mel + LOG_OFFSET)
    z = standardize(logmel)
    fitted = fit_frames(z, config.target_frames, mode, rng)
    return MelSpectrogram(
        values=fitted.astype(np.float32), config=config, source_id=audio.source_path
    )
