"""Waveform loading, resampling and 64-bin log-mel features at 100 frames/s."""

from __future__ import annotations

import io
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
N_FFT = 512  # 32 ms
HOP = 160  # 10 ms
N_MELS = 64
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-10
SILENCE_VAR = 1e-12


class WavFormatError(ValueError):
    """The file is not a 16-bit PCM RIFF/WAVE file."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if len(self.samples) < 1:
            raise ValueError("waveform needs at least one sample")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # [T, 64]
    frame_rate: int = SAMPLE_RATE // HOP

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def frame_count(n_samples: int) -> int:
    """Number of 10 ms frames for ``n_samples`` at 16 kHz, i.e. ceil(n/160)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return -(-int(n_samples) // HOP)


def resample(w: Waveform, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Linear-interpolation resampling; output length is round(n * target / rate)."""
    if len(w.samples) == 0:
        raise ValueError("cannot resample an empty waveform")
    if w.sample_rate == target_rate:
        return w
    n_in = len(w.samples)
    n_out = max(1, int(round(n_in * target_rate / w.sample_rate)))
    positions = np.arange(n_out) * (w.sample_rate / target_rate)
    out = np.interp(positions, np.arange(n_in), w.samples.astype(np.float64))
    return Waveform(out.astype(np.float32), target_rate)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Triangular HTK-scale filters, shape [n_fft//2 + 1, n_mels]."""
    bins = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (centre - lower)
    falling = (upper - bins[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling)).T


_FILTERS = mel_filterbank()
_WINDOW = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(N_FFT) / N_FFT)  # periodic Hann


def log_mel(w: Waveform) -> MelSpectrogram:
    """Normalised log-mel spectrogram with exactly ``frame_count(len(w.samples))`` frames.

    Frame ``t`` is centred on sample ``160 t`` of the reflection-padded signal.
    Normalisation is per utterance over all bins; variance scaling is skipped
    for digital silence.
    """
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"log_mel expects {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    x = np.asarray(w.samples, dtype=np.float64)
    n_frames = frame_count(len(x))
    half = N_FFT // 2
    mode = "reflect" if len(x) > 1 else "edge"
    padded = np.pad(x, half, mode=mode)
    starts = np.arange(n_frames) * HOP
    frames = padded[starts[:, None] + np.arange(N_FFT)[None, :]] * _WINDOW
    power = np.abs(np.fft.rfft(frames, axis=-1)) ** 2
    logmel = np.log(power @ _FILTERS + LOG_FLOOR)
    logmel -= logmel.mean()
    var = logmel.var()
    if var >= SILENCE_VAR:
        logmel /= np.sqrt(var)
    return MelSpectrogram(logmel.astype(np.float32))


def pad_waveform(w: Waveform, seconds: float) -> Waveform:
    """Zero-pad at the tail to ``seconds`` (Whisper-style fixed-length input)."""
    target = int(round(seconds * w.sample_rate))
    if len(w.samples) > target:
        raise ValueError(f"waveform is longer than {seconds} s")
    out = np.zeros(target, dtype=np.float32)
    out[: len(w.samples)] = w.samples
    return Waveform(out, w.sample_rate)


def read_wav(source: str | Path | bytes) -> Waveform:
    """Read 16-bit PCM mono/stereo RIFF/WAVE; stereo is averaged to mono."""
    try:
        handle = wave.open(io.BytesIO(source) if isinstance(source, bytes) else str(source), "rb")
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"not a readable RIFF/WAVE file: {exc}") from exc
    except OSError as exc:
        raise WavFormatError(f"cannot open {source}: {exc}") from exc
    with handle:
        if handle.getcomptype() != "NONE" or handle.getsampwidth() != 2:
            raise WavFormatError("only 16-bit PCM WAV is supported")
        channels = handle.getnchannels()
        rate = handle.getframerate()
        raw = handle.readframes(handle.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    if channels < 1 or pcm.size == 0 or pcm.size % channels:
        raise WavFormatError("WAV has no samples or a truncated frame")
    samples = pcm.reshape(-1, channels).astype(np.float32).mean(axis=1) / 32768.0
    return Waveform(samples.astype(np.float32), rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as handle:
        handle.setnchannels(1)
        handle.setsampwidth(2)
        handle.setframerate(w.sample_rate)
        handle.writeframes(pcm.tobytes())


def load_features(path: str | Path) -> MelSpectrogram:
    return log_mel(resample(read_wav(path)))


def duration_to_samples(duration_s: float, sample_rate: int = SAMPLE_RATE) -> int:
    if not duration_s > 0 or math.isinf(duration_s):
        raise ValueError("duration must be a positive finite number of seconds")
    return max(1, int(round(duration_s * sample_rate)))
