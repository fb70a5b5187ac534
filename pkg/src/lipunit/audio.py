"""Deterministic audio front end: STFT, HTK mel filterbank, log-mel, stacking, Griffin-Lim."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class AudioConfig:
    sample_rate_hz: int = 16000
    win_ms: float = 40.0
    hop_ms: float = 10.0
    n_fft: int = 1024
    n_mels: int = 80
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-5

    @property
    def win_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.win_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000.0))

    @property
    def frame_rate_hz(self) -> float:
        return 1000.0 / self.hop_ms

    def violations(self) -> list[str]:
        errs = []
        if self.win_samples % self.hop_samples:
            errs.append("audio.win_ms must be an integer multiple of audio.hop_ms")
        if (self.win_samples - self.hop_samples) % 2:
            errs.append("audio: win - hop must be even for symmetric padding")
        if self.n_fft < self.win_samples:
            errs.append(f"audio.n_fft ({self.n_fft}) < window length ({self.win_samples})")
        if self.fmax_hz > self.sample_rate_hz / 2:
            errs.append("audio.fmax_hz exceeds Nyquist")
        if not 0 <= self.fmin_hz < self.fmax_hz:
            errs.append("audio.fmin_hz must be in [0, fmax_hz)")
        if self.log_floor <= 0:
            errs.append("audio.log_floor must be positive")
        if self.n_mels < 1:
            errs.append("audio.n_mels must be positive")
        return errs


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def seconds(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # T x n_mels, natural-log
    frame_rate_hz: float = 100.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class StackedMel:
    frames: np.ndarray  # T_s x (factor * n_mels)
    factor: int = 2
    frame_rate_hz: float = 50.0


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _filterbank(sr: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    fft_freqs = np.linspace(0.0, sr / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    # unit area in Hz: peak height 2 / (upper - lower)
    weights *= 2.0 / (upper - lower)
    weights.setflags(write=False)
    return weights


def mel_filterbank(cfg: AudioConfig) -> np.ndarray:
    """Triangular HTK-scale filterbank, shape (n_mels, n_fft // 2 + 1)."""
    return _filterbank(cfg.sample_rate_hz, cfg.n_fft, cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz)


def mel_center_frequencies(cfg: AudioConfig) -> np.ndarray:
    m = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(m[1:-1])


def _window(cfg: AudioConfig) -> np.ndarray:
    return np.hanning(cfg.win_samples + 1)[:-1]  # periodic Hann


def _pad(cfg: AudioConfig) -> int:
    return (cfg.win_samples - cfg.hop_samples) // 2


def stft(x: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """Complex STFT with reflect padding so that frame count is len(x) // hop."""
    pad = _pad(cfg)
    win, hop = cfg.win_samples, cfg.hop_samples
    n_frames = len(x) // hop
    if pad:
        mode = "reflect" if len(x) > pad else "symmetric"
        x = np.pad(x, (pad, pad), mode=mode)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * _window(cfg)
    return np.fft.rfft(frames, n=cfg.n_fft, axis=1)


def istft(spec: np.ndarray, cfg: AudioConfig, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    win, hop = cfg.win_samples, cfg.hop_samples
    pad = _pad(cfg)
    n_frames = spec.shape[0]
    window = _window(cfg)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, :win] * window
    total = hop * (n_frames - 1) + win
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        out[t * hop:t * hop + win] += frames[t]
        norm[t * hop:t * hop + win] += window ** 2
    out /= np.where(norm > 1e-8, norm, 1.0)
    out = out[pad:pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


def _check_rate(waveform: Waveform, cfg: AudioConfig):
    if len(waveform) == 0:
        raise ValueError("empty waveform")
    if waveform.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(
            f"sample rate {waveform.sample_rate_hz} Hz does not match config "
            f"{cfg.sample_rate_hz} Hz; resample first"
        )


def log_mel(waveform: Waveform, cfg: AudioConfig = AudioConfig()) -> MelSpectrogram:
    """Natural-log mel magnitudes, one frame per hop, clamped at ``log(cfg.log_floor)``."""
    _check_rate(waveform, cfg)
    if len(waveform) < cfg.hop_samples:
        raise ValueError("waveform shorter than one hop")
    mag = np.abs(stft(waveform.samples, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg.frame_rate_hz)


def stack_mel(mel: MelSpectrogram, factor: int = 2) -> StackedMel:
    if factor <= 0:
        raise ValueError("stacking factor must be >= 1")
    t = mel.num_frames // factor
    frames = mel.frames[: t * factor].reshape(t, factor * mel.frames.shape[1])
    return StackedMel(frames, factor, mel.frame_rate_hz / factor)


def unstack_mel(stacked: StackedMel) -> MelSpectrogram:
    t, d = stacked.frames.shape
    frames = stacked.frames.reshape(t * stacked.factor, d // stacked.factor)
    return MelSpectrogram(frames, stacked.frame_rate_hz * stacked.factor)


def mel_to_linear(mel: MelSpectrogram, cfg: AudioConfig) -> np.ndarray:
    """Pseudo-inverse of the filterbank, clipped to non-negative magnitudes."""
    fb = mel_filterbank(cfg)
    if mel.frames.shape[1] != fb.shape[0]:
        raise ValueError(f"mel has {mel.frames.shape[1]} bins, config expects {fb.shape[0]}")
    inv = _pinv(cfg.sample_rate_hz, cfg.n_fft, cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz)
    return np.maximum(np.exp(mel.frames) @ inv.T, 0.0)


@lru_cache(maxsize=4)
def _pinv(sr, n_fft, n_mels, fmin, fmax):
    return np.linalg.pinv(_filterbank(sr, n_fft, n_mels, fmin, fmax))


def griffin_lim(mel: MelSpectrogram, cfg: AudioConfig = AudioConfig(), iterations: int = 60) -> Waveform:
    """Non-neural inversion; starts from zero phase so results are reproducible."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    mag = mel_to_linear(mel, cfg)
    length = mel.num_frames * cfg.hop_samples
    spec = mag.astype(np.complex128)
    x = istft(spec, cfg, length)
    for _ in range(iterations):
        rebuilt = stft(x, cfg)
        spec = mag * np.exp(1j * np.angle(rebuilt))
        x = istft(spec, cfg, length)
    return Waveform(x, cfg.sample_rate_hz)
