"""Audio front end: PCM input, mel spectrograms, standardization, MFCC baseline.

The analysis chain is magnitude STFT -> triangular mel filter bank -> dB
scale, with per-band standardization fitted on a training corpus. Frames are
taken from a signal zero-padded by half a window on each side (centered
analysis), so a 2.5 s clip at 22050 Hz with the default 1024/256 analysis
yields 216 frames. With ``center=False`` no padding is applied and the frame
count is ``1 + floor((len - window) / hop)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.io.wavfile

DEFAULT_WINDOW = 1024
DEFAULT_HOP = 256
DEFAULT_BANDS = 128
DB_FLOOR_AMPLITUDE = 1e-10
SD_CLAMP = 1e-8
MFCC_COEFFS = 20


class DspError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    """PCM audio: `samples` has shape (channels, n), amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise DspError("samples must be (channels, n)")
        if samples.shape[0] not in (1, 2):
            raise DspError(f"expected 1 or 2 channels, got {samples.shape[0]}")
        if not np.all(np.isfinite(samples)):
            raise DspError("samples contain non-finite values")
        if self.sample_rate <= 0:
            raise DspError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class Spectrogram:
    """Mel spectrogram tensor of shape (channels, frames, bands), dB scale."""

    values: np.ndarray
    hop: int
    window: int
    bands: int

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise DspError("spectrogram must be (channels, frames, bands)")
        if values.shape[2] != self.bands:
            raise DspError("band count does not match tensor shape")
        if not np.all(np.isfinite(values)):
            raise DspError("spectrogram contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        sd = np.asarray(self.sd, dtype=np.float64)
        if mean.shape != sd.shape or mean.ndim != 1:
            raise DspError("stats must be matching 1-d band vectors")
        if np.any(sd <= 0):
            raise DspError("standard deviations must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)


def read_wav(path: str | Path) -> AudioClip:
    """Read a PCM WAV file (16-bit int or 32-bit float, mono or stereo)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing audio file: {path}")
    rate, data = scipy.io.wavfile.read(str(path))
    if data.dtype == np.int16:
        values = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        values = data.astype(np.float64)
    else:
        raise DspError(f"{path}: unsupported sample format {data.dtype}")
    if values.ndim == 1:
        values = values[None, :]
    else:
        values = values.T
    return AudioClip(samples=values, sample_rate=int(rate))


def write_wav(path: str | Path, clip: AudioClip) -> None:
    data = np.clip(clip.samples.T, -1.0, 1.0).astype(np.float32)
    if data.shape[1] == 1:
        data = data[:, 0]
    scipy.io.wavfile.write(str(path), clip.sample_rate, data)


def hann_window(size: int) -> np.ndarray:
    # Periodic variant, the usual choice for overlapped analysis.
    n = np.arange(size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / size)


def hz_to_mel(freq_hz: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel: np.ndarray | float) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_bank(sample_rate: int, window: int, bands: int) -> np.ndarray:
    """Triangular mel filters, shape (bands, window // 2 + 1), 0..Nyquist."""
    nyquist = sample_rate / 2.0
    fft_freqs = np.arange(window // 2 + 1) * sample_rate / window
    mel_points = np.linspace(0.0, float(hz_to_mel(nyquist)), bands + 2)
    hz_points = mel_to_hz(mel_points)
    bank = np.zeros((bands, fft_freqs.size))
    for b in range(bands):
        left, center, right = hz_points[b], hz_points[b + 1], hz_points[b + 2]
        rising = (fft_freqs - left) / max(center - left, 1e-12)
        falling = (right - fft_freqs) / max(right - center, 1e-12)
        bank[b] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def frame_count(length: int, window: int, hop: int, center: bool = True) -> int:
    effective = length + 2 * (window // 2) if center else length
    if effective < window:
        raise DspError("clip too short")
    return 1 + (effective - window) // hop


def stft_magnitude(
    signal: np.ndarray,
    window: int = DEFAULT_WINDOW,
    hop: int = DEFAULT_HOP,
    center: bool = True,
) -> np.ndarray:
    """Magnitude STFT of a 1-d signal, shape (frames, window // 2 + 1)."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise DspError("stft expects a single channel")
    if center:
        pad = window // 2
        signal = np.pad(signal, (pad, pad))
    if signal.size < window:
        raise DspError("clip too short")
    n_frames = 1 + (signal.size - window) // hop
    taper = hann_window(window)
    stride = signal.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        signal, shape=(n_frames, window), strides=(hop * stride, stride)
    )
    return np.abs(np.fft.rfft(frames * taper, axis=1))


def stft_mel_db(
    clip: AudioClip,
    window: int = DEFAULT_WINDOW,
    hop: int = DEFAULT_HOP,
    bands: int = DEFAULT_BANDS,
    center: bool = True,
) -> Spectrogram:
    """Per-channel dB mel spectrogram: 20*log10 of mel-filtered magnitudes."""
    if clip.length < window:
        raise DspError("clip too short")
    bank = mel_filter_bank(clip.sample_rate, window, bands)
    channels = []
    for ch in range(clip.channels):
        mag = stft_magnitude(clip.samples[ch], window=window, hop=hop, center=center)
        mel = mag @ bank.T
        channels.append(20.0 * np.log10(np.maximum(mel, DB_FLOOR_AMPLITUDE)))
    return Spectrogram(values=np.stack(channels), hop=hop, window=window, bands=bands)


def fit_standardization(corpus) -> StandardizationStats:
    """Per-band mean/sd over all frames of all clips, channels pooled."""
    stacks = []
    for spec in corpus:
        values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
        stacks.append(values.reshape(-1, values.shape[-1]))
    if not stacks:
        raise DspError("empty corpus")
    pooled = np.concatenate(stacks, axis=0)
    mean = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    return StandardizationStats(mean=mean, sd=np.maximum(sd, SD_CLAMP))


def apply_standardization(spec: Spectrogram, stats: StandardizationStats) -> Spectrogram:
    if spec.bands != stats.mean.size:
        raise DspError(
            f"band mismatch: spectrogram has {spec.bands}, stats have {stats.mean.size}"
        )
    values = (spec.values - stats.mean) / stats.sd
    return Spectrogram(values=values, hop=spec.hop, window=spec.window, bands=spec.bands)


def _temporal_delta(seq: np.ndarray) -> np.ndarray:
    # Central differences with edge replication along the frame axis.
    padded = np.concatenate([seq[:1], seq, seq[-1:]], axis=0)
    return (padded[2:] - padded[:-2]) / 2.0


def mfcc_from_logmel(logmel: np.ndarray, coeffs: int = MFCC_COEFFS) -> np.ndarray:
    """Aggregate MFCCs (+ deltas, delta-deltas) from a (frames, bands) log-mel."""
    logmel = np.asarray(logmel, dtype=np.float64)
    if logmel.ndim != 2 or logmel.shape[0] < 3:
        raise DspError("clip too short for derivative features")
    cepstra = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, :coeffs]
    delta = _temporal_delta(cepstra)
    delta2 = _temporal_delta(delta)
    per_frame = np.concatenate([cepstra, delta, delta2], axis=1)
    return np.concatenate([per_frame.mean(axis=0), per_frame.std(axis=0)])


def mfcc_feature(
    clip: AudioClip,
    window: int = DEFAULT_WINDOW,
    hop: int = DEFAULT_HOP,
    bands: int = DEFAULT_BANDS,
) -> np.ndarray:
    """120-dim MFCC summary: [means(60), sds(60)] over frames.

    Stereo clips are averaged to mono before analysis.
    """
    mono = AudioClip(samples=clip.samples.mean(axis=0, keepdims=True), sample_rate=clip.sample_rate)
    spec = stft_mel_db(mono, window=window, hop=hop, bands=bands)
    return mfcc_from_logmel(spec.values[0])
