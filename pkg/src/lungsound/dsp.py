"""Waveform I/O and signal processing: resampling, event clip extraction,
fixed-duration windowing, mel spectrograms, and scalar spectral features.

All internal audio is float64 in [-1, 1]. The pipeline standard is 16 kHz
mono and 2.0 s clips (32000 samples).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as scipy_signal
from scipy.io import wavfile

from .errors import ContractError, DataError

TARGET_SAMPLE_RATE = 16000
CLIP_DURATION_S = 2.0
CLIP_SAMPLES = int(round(CLIP_DURATION_S * TARGET_SAMPLE_RATE))


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float64, mono
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path: Path) -> Waveform:
    """Load a PCM WAV as float64 in [-1, 1]. Multi-channel input is averaged to mono."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise DataError(f"audio file not found: {path}") from None
    except ValueError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from None
    if data.ndim == 2:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        scale = float(np.iinfo(data.dtype).max)
        samples = data.astype(np.float64) / scale
    else:
        samples = data.astype(np.float64)
    return Waveform(samples, int(rate))


def write_wav(path: Path, waveform: Waveform) -> None:
    """Write 16-bit PCM. Samples are clipped to [-1, 1] first."""
    clipped = np.clip(waveform.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    wavfile.write(path, waveform.sample_rate, pcm)


def resample(waveform: Waveform, target_rate: int = TARGET_SAMPLE_RATE) -> Waveform:
    """Polyphase resampling with a Kaiser-windowed filter.

    Output length is exactly round(n * target / source); the polyphase output can
    land one sample long or short of that, which is trimmed or edge-padded.
    """
    if target_rate <= 0:
        raise DataError(f"target rate must be positive, got {target_rate}")
    if waveform.sample_rate == target_rate:
        return waveform
    g = math.gcd(target_rate, waveform.sample_rate)
    up, down = target_rate // g, waveform.sample_rate // g
    out = scipy_signal.resample_poly(waveform.samples, up, down, window=("kaiser", 5.0))
    n_expected = int(round(len(waveform.samples) * target_rate / waveform.sample_rate))
    if len(out) > n_expected:
        out = out[:n_expected]
    elif len(out) < n_expected:
        if n_expected - len(out) > 1:
            raise ContractError(
                f"resampler output off by {n_expected - len(out)} samples, expected at most 1"
            )
        out = np.pad(out, (0, n_expected - len(out)), mode="edge")
    return Waveform(out, target_rate)


def extract_event_clip(
    waveform: Waveform, start_ms: float, end_ms: float, margin: float = 0.1
) -> Waveform:
    """Cut [start, end] plus a symmetric margin of margin * duration on each side,
    clipped to the recording bounds.
    """
    if not 0 <= start_ms < end_ms:
        raise DataError(f"need 0 <= start < end, got [{start_ms}, {end_ms}]")
    if margin < 0:
        raise DataError(f"margin must be non-negative, got {margin}")
    pad_ms = margin * (end_ms - start_ms)
    total_ms = 1000.0 * len(waveform.samples) / waveform.sample_rate
    lo_ms = max(0.0, start_ms - pad_ms)
    hi_ms = min(total_ms, end_ms + pad_ms)
    lo = int(round(lo_ms * waveform.sample_rate / 1000.0))
    hi = int(round(hi_ms * waveform.sample_rate / 1000.0))
    hi = min(hi, len(waveform.samples))
    if hi <= lo:
        raise DataError(f"event [{start_ms}, {end_ms}] ms lies outside the recording")
    return Waveform(waveform.samples[lo:hi].copy(), waveform.sample_rate)


def standardize_window(waveform: Waveform, duration_s: float = CLIP_DURATION_S) -> Waveform:
    """Force an exact sample count round(duration * rate) by center crop or
    symmetric zero pad. Odd pad puts the extra sample on the right; odd crop
    drops the extra sample from the right.
    """
    n_target = int(round(duration_s * waveform.sample_rate))
    if n_target <= 0:
        raise DataError(f"duration {duration_s} too short at {waveform.sample_rate} Hz")
    n = len(waveform.samples)
    if n == n_target:
        out = waveform.samples
    elif n < n_target:
        left = (n_target - n) // 2
        out = np.pad(waveform.samples, (left, n_target - n - left))
    else:
        start = (n - n_target) // 2
        out = waveform.samples[start:start + n_target]
    if len(out) != n_target:
        raise ContractError(f"standardize_window produced {len(out)} samples, wanted {n_target}")
    return Waveform(np.asarray(out, dtype=np.float64), waveform.sample_rate)


def prepare_clip(
    waveform: Waveform,
    start_ms: float,
    end_ms: float,
    margin: float = 0.1,
    duration_s: float = CLIP_DURATION_S,
    target_rate: int = TARGET_SAMPLE_RATE,
) -> Waveform:
    """Full clip path: resample, cut the event with margin, standardize duration."""
    resampled = resample(waveform, target_rate)
    clip = extract_event_clip(resampled, start_ms, end_ms, margin)
    return standardize_window(clip, duration_s)


# ---------------------------------------------------------------------------
# Spectral analysis
# ---------------------------------------------------------------------------

def _hann(n: int) -> np.ndarray:
    # periodic form, suited to overlapped framing
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, frame_length: int, hop_length: int) -> np.ndarray:
    """(n_frames, frame_length) view of consecutive hops. Short signals are
    zero-padded to one full frame.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < frame_length:
        samples = np.pad(samples, (0, frame_length - len(samples)))
    n_frames = 1 + (len(samples) - frame_length) // hop_length
    idx = np.arange(frame_length)[None, :] + hop_length * np.arange(n_frames)[:, None]
    return samples[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int, n_fft: int, sample_rate: int, fmin: float = 50.0, fmax: float | None = None
) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular filters, equally spaced on the mel scale."""
    if fmax is None:
        fmax = sample_rate / 2.0
    if not 0 <= fmin < fmax <= sample_rate / 2.0:
        raise DataError(f"need 0 <= fmin < fmax <= Nyquist, got [{fmin}, {fmax}]")
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - left) / max(center - left, 1e-12)
        falling = (right - bin_freqs) / max(right - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_spectrogram(
    waveform: Waveform,
    n_fft: int = 512,
    hop_length: int = 160,
    n_mels: int = 32,
    fmin: float = 50.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Power mel spectrogram, shape (n_mels, n_frames)."""
    frames = frame_signal(waveform.samples, n_fft, hop_length)
    windowed = frames * _hann(n_fft)[None, :]
    power = np.abs(np.fft.rfft(windowed, axis=1)) ** 2
    fb = mel_filterbank(n_mels, n_fft, waveform.sample_rate, fmin, fmax)
    return fb @ power.T


def log_mel_energies(waveform: Waveform, n_mels: int = 32, eps: float = 1e-10) -> np.ndarray:
    """Per-band log of the time-averaged mel power, shape (n_mels,).

    Scaling the waveform by g shifts every band by 2 log g.
    """
    mel = mel_spectrogram(waveform, n_mels=n_mels)
    return np.log(mel.mean(axis=1) + eps)


def zero_crossing_rate(samples: np.ndarray) -> float:
    s = np.sign(np.asarray(samples, dtype=np.float64))
    s[s == 0] = 1.0
    if len(s) < 2:
        return 0.0
    return float(np.mean(s[1:] != s[:-1]))


def rms_energy(samples: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(np.asarray(samples, dtype=np.float64)))))


def spectral_centroid(waveform: Waveform) -> float:
    power = np.abs(np.fft.rfft(waveform.samples)) ** 2
    freqs = np.fft.rfftfreq(len(waveform.samples), d=1.0 / waveform.sample_rate)
    total = power.sum()
    if total <= 0:
        return 0.0
    return float((freqs * power).sum() / total)


def spectral_flatness(waveform: Waveform, eps: float = 1e-12) -> float:
    power = np.abs(np.fft.rfft(waveform.samples)) ** 2 + eps
    return float(np.exp(np.mean(np.log(power))) / np.mean(power))
