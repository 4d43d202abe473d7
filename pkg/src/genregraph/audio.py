"""WAV loading and log-MEL spectrograms."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

LOG_FLOOR = 1e-10


class AudioError(ValueError):
    pass


class AudioFileNotFoundError(FileNotFoundError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class EmptyAudioError(AudioError):
    pass


class SampleRateMismatchError(AudioError):
    pass


class ClipTooShortError(AudioError):
    pass


class InvalidFrequencyRangeError(AudioError):
    pass


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 11025.0

    def frames_for(self, n_samples: int) -> int:
        return 1 + (n_samples - self.n_fft) // self.hop

    def samples_for_frames(self, frames: int) -> int:
        return self.n_fft + (frames - 1) * self.hop


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelFilterbank:
    weights: np.ndarray  # [n_mels, n_fft // 2 + 1]
    centers_hz: np.ndarray
    f_min: float
    f_max: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    def rows_in_band(self, lo_hz: float, hi_hz: float) -> np.ndarray:
        """Indices of filters whose center frequency lies in [lo_hz, hi_hz]."""
        return np.flatnonzero((self.centers_hz >= lo_hz) & (self.centers_hz <= hi_hz))


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [n_mels, n_frames]
    config: SpectrogramConfig = field(default_factory=SpectrogramConfig)

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def load_wav(path) -> AudioClip:
    """Read a PCM16 WAV, averaging channels and scaling by 1/32768."""
    path = Path(path)
    if not path.is_file():
        raise AudioFileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            width = wf.getsampwidth()
            channels = wf.getnchannels()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as err:
        raise UnsupportedEncodingError(f"{path}: {err}") from None
    except EOFError:
        raise EmptyAudioError(f"{path}: truncated header") from None
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
    data = np.frombuffer(raw, dtype="<i2")
    if data.size == 0:
        raise EmptyAudioError(f"{path}: no audio frames")
    data = data[: data.size - data.size % channels].reshape(-1, channels)
    samples = data.astype(np.float64).mean(axis=1) / 32768.0
    return AudioClip(samples, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


def mel_filterbank(config: SpectrogramConfig = SpectrogramConfig()) -> MelFilterbank:
    if not (0 <= config.f_min < config.f_max <= config.sample_rate / 2):
        raise InvalidFrequencyRangeError(
            f"need 0 <= f_min < f_max <= {config.sample_rate / 2}, got {config.f_min}..{config.f_max}")
    if config.n_mels < 2:
        raise InvalidFrequencyRangeError("n_mels must be at least 2")
    edges = mel_to_hz(np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2))
    bins = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - left) / (center - left)
    falling = (right - bins) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.max(axis=1) == 0)
    if empty.size:
        raise InvalidFrequencyRangeError(
            f"filters {empty.tolist()} cover no FFT bin; use fewer mels or a larger n_fft")
    return MelFilterbank(weights, edges[1:-1].copy(), config.f_min, config.f_max)


def mel_power(clip: AudioClip, config: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Pre-log mel energies [n_mels, n_frames] from a Hann-windowed power STFT."""
    if clip.sample_rate != config.sample_rate:
        raise SampleRateMismatchError(f"clip is {clip.sample_rate} Hz, config expects {config.sample_rate} Hz")
    if len(clip.samples) < config.n_fft:
        raise ClipTooShortError(f"{len(clip.samples)} samples is shorter than one {config.n_fft}-sample frame")
    frames = sliding_window_view(clip.samples, config.n_fft)[:: config.hop]
    spectrum = np.fft.rfft(frames * get_window("hann", config.n_fft), axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    return mel_filterbank(config).weights @ power.T


def mel_spectrogram(clip: AudioClip, config: SpectrogramConfig = SpectrogramConfig()) -> MelSpectrogram:
    """log10 mel power with a 1e-10 floor, min-max scaled to [0, 1]."""
    logmel = np.log10(np.maximum(mel_power(clip, config), LOG_FLOOR))
    lo, hi = logmel.min(), logmel.max()
    values = (logmel - lo) / (hi - lo) if hi > lo else np.zeros_like(logmel)
    return MelSpectrogram(values, config)


def fixed_size_crop(spec: MelSpectrogram, frames: int) -> MelSpectrogram:
    """Center-crop or zero-pad (split evenly, extra column on the right) to ``frames`` columns."""
    if frames <= 0:
        raise ValueError("frames must be positive")
    v = spec.values
    n = v.shape[1]
    if n >= frames:
        start = (n - frames) // 2
        out = v[:, start:start + frames].copy()
    else:
        left = (frames - n) // 2
        out = np.zeros((v.shape[0], frames))
        out[:, left:left + n] = v
    return MelSpectrogram(out, spec.config)


def segment_clip(clip: AudioClip, seconds: float = 5.0) -> list[AudioClip]:
    """Non-overlapping fixed-length segments; a trailing remainder is dropped."""
    size = int(round(seconds * clip.sample_rate))
    count = len(clip.samples) // size
    return [AudioClip(clip.samples[k * size:(k + 1) * size].copy(), clip.sample_rate)
            for k in range(count)]
