"""Waveform loading, random frame extraction and square mel-spectrogram images."""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import Union

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

DEFAULT_RATE = 16_000
DB_FLOOR = -80.0
AMIN = 1e-10


class AudioError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray  # float32, mono
    sample_rate: int

    def __post_init__(self):
        if self.samples.ndim != 1:
            raise AudioError(f"waveform must be mono, got shape {self.samples.shape}")
        if len(self.samples) == 0:
            raise AudioError("empty audio")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class FrameSet:
    frames: np.ndarray  # (K, L)
    offsets: np.ndarray  # (K,)
    seed: int


@dataclass
class MelImage:
    pixels: np.ndarray  # (F, F) in [0, 1]
    window_size: int
    frame_index: int = 0


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        return (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    return data.astype(np.float32)


def load_audio(path: Union[str, Path], target_rate: int = DEFAULT_RATE) -> Waveform:
    """Read a PCM WAV file as a mono float waveform at ``target_rate``."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise AudioError(f"cannot read {path}: {exc}") from exc
    samples = _to_float(np.asarray(data))
    if samples.ndim == 2:
        samples = samples.mean(axis=1, dtype=np.float32)
    if samples.size == 0:
        raise AudioError(f"empty audio: {path}")
    if rate != target_rate:
        g = gcd(int(rate), int(target_rate))
        samples = resample_poly(samples, target_rate // g, rate // g).astype(np.float32)
    peak = float(np.max(np.abs(samples)))
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples, target_rate)


def save_audio(path: Union[str, Path], wave: Waveform) -> None:
    pcm = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), wave.sample_rate, pcm)


def tile_to_length(samples: np.ndarray, length: int) -> np.ndarray:
    """Repeat ``samples`` end-to-end until at least ``length`` long."""
    if len(samples) >= length:
        return samples
    reps = math.ceil(length / len(samples))
    return np.tile(samples, reps)


def extract_frames(w: Waveform, K: int, L: int, seed: int) -> FrameSet:
    """Draw ``K`` random windows of ``L`` samples, tiling short audio first."""
    if K < 1 or L < 1:
        raise AudioError(f"need K >= 1 and L >= 1, got K={K}, L={L}")
    samples = tile_to_length(w.samples, L)
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, len(samples) - L + 1, size=K)
    frames = np.stack([samples[o : o + L] for o in offsets])
    return FrameSet(frames, offsets, seed)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, rate: int) -> np.ndarray:
    """Triangular HTK-mel filters over [0, rate/2]; shape (n_mels, n_fft // 2 + 1)."""
    fft_freqs = np.linspace(0.0, rate / 2.0, n_fft // 2 + 1)
    mel_pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(rate / 2.0), n_mels + 2))
    fdiff = np.diff(mel_pts)
    ramps = mel_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    return np.maximum(0.0, np.minimum(lower, upper))


_FB_CACHE: dict = {}


def _cached_filterbank(n_mels: int, n_fft: int, rate: int) -> torch.Tensor:
    key = (n_mels, n_fft, rate)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = torch.from_numpy(mel_filterbank(n_mels, n_fft, rate))
    return _FB_CACHE[key]


def _fit_width(x: torch.Tensor, width: int, fill: float) -> torch.Tensor:
    n = x.shape[-1]
    if n >= width:
        start = (n - width) // 2
        return x[..., start : start + width]
    left = (width - n) // 2
    return torch.nn.functional.pad(x, (left, width - n - left), value=fill)


def mel_image(frame: np.ndarray, window_size: int, F: int = 128, rate: int = DEFAULT_RATE) -> MelImage:
    """Square (F, F) dB mel-spectrogram image, min-max scaled to [0, 1].

    Hann window of ``window_size`` samples, hop ``ceil(L / F)``; the time
    axis is center-cropped (or padded with the dB floor) to ``F`` columns.
    """
    L = len(frame)
    if window_size > L:
        raise AudioError(f"window {window_size} longer than frame {L}")
    if F < 8:
        raise AudioError(f"need at least 8 mel bands, got {F}")
    x = torch.as_tensor(np.asarray(frame, dtype=np.float64))
    hop = math.ceil(L / F)
    spec = torch.stft(
        x,
        n_fft=window_size,
        hop_length=hop,
        win_length=window_size,
        window=torch.hann_window(window_size, dtype=torch.float64),
        center=True,
        pad_mode="reflect" if L > window_size // 2 else "constant",
        return_complex=True,
    ).abs()
    mel = _cached_filterbank(F, window_size, rate) @ spec
    ref = max(float(mel.max()), AMIN)
    db = 20.0 * torch.log10(torch.clamp(mel, min=AMIN) / ref)
    db = torch.clamp(db, min=DB_FLOOR)
    db = _fit_width(db, F, DB_FLOOR)
    lo, hi = float(db.min()), float(db.max())
    if hi - lo <= 0.0:
        pixels = torch.zeros_like(db)
    else:
        pixels = (db - lo) / (hi - lo)
    return MelImage(pixels.numpy().astype(np.float32), window_size)


def mel_stack(frames: np.ndarray, windows, F: int, rate: int) -> np.ndarray:
    """(K, L) frames -> (K, N, F, F) images for every window size."""
    return np.stack(
        [np.stack([mel_image(frame, w, F, rate).pixels for w in windows]) for frame in frames]
    )
