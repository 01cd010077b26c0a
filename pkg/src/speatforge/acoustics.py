"""Classic spectral front-ends: STFT, spectrogram, mel filterbank, MFCC.

All operations are pure functions of (waveform, parameters): identical inputs
give bit-identical outputs, so they are safe to run in parallel per stimulus.
Framing follows the usual convention n_frames = 1 + floor((len - window)/hop)
with no padding of the signal itself (only FFT zero-padding per frame).
"""

from dataclasses import dataclass
from enum import Enum
import wave

import numpy as np
import scipy.fft

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_WINDOW_SECONDS = 0.025
DEFAULT_HOP_SECONDS = 0.010
DEFAULT_N_FFT = 512
DEFAULT_N_MELS = 80
DEFAULT_N_MFCC = 13

# Floor added to mel energies before the log so silent frames stay finite.
LOG_FLOOR = 1e-10


class FeatureKind(str, Enum):
    STFT_COMPLEX = "stft_complex"
    SPECTROGRAM = "spectrogram"
    MEL = "mel"
    LOG_MEL = "log_mel"
    MFCC = "mfcc"


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(
            self, "samples", np.asarray(self.samples, dtype=np.float64)
        )

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class FrameMatrix:
    """Frame-major feature matrix (n_frames x n_features) with provenance."""

    frames: np.ndarray
    feature_kind: FeatureKind
    hop_seconds: float
    window_seconds: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_features(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class SpectralParams:
    """Framing and FFT parameters shared by all front-ends."""

    window_samples: int = int(DEFAULT_WINDOW_SECONDS * DEFAULT_SAMPLE_RATE)
    hop_samples: int = int(DEFAULT_HOP_SECONDS * DEFAULT_SAMPLE_RATE)
    n_fft: int = DEFAULT_N_FFT
    window_fn: str = "hann"  # "hann" or "rect"

    def __post_init__(self):
        if self.window_samples < 1 or self.hop_samples < 1:
            raise ValueError("window_samples and hop_samples must be >= 1")
        if self.n_fft < self.window_samples:
            raise ValueError(
                f"n_fft ({self.n_fft}) must be >= window_samples ({self.window_samples})"
            )
        if self.window_fn not in ("hann", "rect"):
            raise ValueError(f"unknown window_fn: {self.window_fn}")

    def window(self) -> np.ndarray:
        if self.window_fn == "rect":
            return np.ones(self.window_samples)
        n = np.arange(self.window_samples)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.window_samples)


def frame_count(n_samples: int, window_samples: int, hop_samples: int) -> int:
    """Number of full frames: 1 + floor((len - window)/hop)."""
    if n_samples < window_samples:
        raise ValueError(
            f"signal_too_short: {n_samples} samples < window of {window_samples}"
        )
    return 1 + (n_samples - window_samples) // hop_samples


def _windowed_frames(w: Waveform, params: SpectralParams) -> np.ndarray:
    n_frames = frame_count(len(w), params.window_samples, params.hop_samples)
    idx = (
        np.arange(params.window_samples)[None, :]
        + params.hop_samples * np.arange(n_frames)[:, None]
    )
    return w.samples[idx] * params.window()[None, :]


def stft(w: Waveform, params: SpectralParams = SpectralParams()) -> FrameMatrix:
    """Short-time Fourier transform; complex (n_frames x n_fft/2+1) bins."""
    frames = _windowed_frames(w, params)
    spec = np.fft.rfft(frames, n=params.n_fft, axis=1)
    return FrameMatrix(
        frames=spec,
        feature_kind=FeatureKind.STFT_COMPLEX,
        hop_seconds=params.hop_samples / w.sample_rate,
        window_seconds=params.window_samples / w.sample_rate,
    )


def spectrogram(w: Waveform, params: SpectralParams = SpectralParams()) -> FrameMatrix:
    """Power spectrogram: squared magnitude of the STFT, bin-wise."""
    s = stft(w, params)
    power = np.abs(s.frames) ** 2
    return FrameMatrix(
        frames=power,
        feature_kind=FeatureKind.SPECTROGRAM,
        hop_seconds=s.hop_seconds,
        window_seconds=s.window_seconds,
    )


def hz_to_mel(f):
    """HTK mel scale: 2595 * log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank (n_mels x n_fft/2+1) spanning [0, sr/2].

    Triangles are unit-peak and linear in Hz between mel-spaced break
    frequencies, evaluated at the exact bin frequencies k*sr/n_fft; no area
    normalization, so per-bin total weight inside the span lies in (0, 1].
    """
    n_bins = n_fft // 2 + 1
    if n_mels < 1:
        raise ValueError(f"n_mels must be >= 1, got {n_mels}")
    if n_mels > n_bins:
        raise ValueError(f"too_many_mels: {n_mels} filters > {n_bins} FFT bins")
    break_hz = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bin_hz = np.arange(n_bins) * sample_rate / n_fft
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, center, right = break_hz[m], break_hz[m + 1], break_hz[m + 2]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_spectrogram(
    w: Waveform,
    params: SpectralParams = SpectralParams(),
    n_mels: int = DEFAULT_N_MELS,
) -> FrameMatrix:
    """Mel-band energies: triangular filterbank applied to the spectrogram."""
    power = spectrogram(w, params)
    fb = mel_filterbank(n_mels, params.n_fft, w.sample_rate)
    return FrameMatrix(
        frames=power.frames @ fb.T,
        feature_kind=FeatureKind.MEL,
        hop_seconds=power.hop_seconds,
        window_seconds=power.window_seconds,
    )


def log_mel_spectrogram(
    w: Waveform,
    params: SpectralParams = SpectralParams(),
    n_mels: int = DEFAULT_N_MELS,
) -> FrameMatrix:
    """log(mel + floor); the model-facing variant of mel_spectrogram."""
    mel = mel_spectrogram(w, params, n_mels)
    return FrameMatrix(
        frames=np.log(mel.frames + LOG_FLOOR),
        feature_kind=FeatureKind.LOG_MEL,
        hop_seconds=mel.hop_seconds,
        window_seconds=mel.window_seconds,
    )


def mfcc(
    w: Waveform,
    params: SpectralParams = SpectralParams(),
    n_mels: int = DEFAULT_N_MELS,
    n_coeffs: int = DEFAULT_N_MFCC,
) -> FrameMatrix:
    """Orthonormal DCT-II of the log-mel spectrum, first n_coeffs kept."""
    if n_coeffs > n_mels:
        raise ValueError(f"n_coeffs ({n_coeffs}) must be <= n_mels ({n_mels})")
    logmel = log_mel_spectrogram(w, params, n_mels)
    coeffs = scipy.fft.dct(logmel.frames, type=2, norm="ortho", axis=1)
    return FrameMatrix(
        frames=coeffs[:, :n_coeffs],
        feature_kind=FeatureKind.MFCC,
        hop_seconds=logmel.hop_seconds,
        window_seconds=logmel.window_seconds,
    )


def extract_features(
    w: Waveform,
    kind: FeatureKind | str,
    params: SpectralParams = SpectralParams(),
    n_mels: int = DEFAULT_N_MELS,
    n_coeffs: int = DEFAULT_N_MFCC,
) -> np.ndarray:
    """Real-valued feature matrix for a named front-end (STFT as magnitude)."""
    kind = FeatureKind(kind)
    if kind is FeatureKind.STFT_COMPLEX:
        return np.abs(stft(w, params).frames)
    if kind is FeatureKind.SPECTROGRAM:
        return spectrogram(w, params).frames
    if kind is FeatureKind.MEL:
        return mel_spectrogram(w, params, n_mels).frames
    if kind is FeatureKind.LOG_MEL:
        return log_mel_spectrogram(w, params, n_mels).frames
    if kind is FeatureKind.MFCC:
        return mfcc(w, params, n_mels, n_coeffs).frames
    raise ValueError(f"unknown feature kind: {kind}")


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV file into a float waveform in [-1, 1]."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"expected mono WAV, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        raw = f.readframes(f.getnframes())
        rate = f.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)


def write_wav(path, w: Waveform) -> None:
    """Write a waveform as mono 16-bit little-endian PCM."""
    scaled = np.round(np.clip(w.samples, -1.0, 1.0) * 32768.0)
    pcm = np.clip(scaled, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
