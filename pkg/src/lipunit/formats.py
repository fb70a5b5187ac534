"""On-disk containers: MELF mel files, VIDF frame tensors, 16-bit WAV, unit text files."""

from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np

from .audio import MelSpectrogram, Waveform

MELF_MAGIC = b"MELF"
MELF_VERSION = 1
VIDF_MAGIC = b"VIDF"


class FormatError(ValueError):
    """Raised for corrupted, truncated, or mis-versioned files."""


def _read_exact(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise FormatError(f"truncated file while reading {what}")
    return buf[offset:offset + n]


def save_mel(mel: MelSpectrogram, path) -> None:
    frames = np.ascontiguousarray(mel.frames, dtype="<f4")
    t, n = frames.shape
    with open(path, "wb") as fh:
        fh.write(MELF_MAGIC)
        fh.write(struct.pack("<IIIf", MELF_VERSION, t, n, mel.frame_rate_hz))
        fh.write(frames.tobytes())


def load_mel(path) -> MelSpectrogram:
    buf = Path(path).read_bytes()
    if _read_exact(buf, 0, 4, "magic") != MELF_MAGIC:
        raise FormatError(f"{path}: not a MELF file")
    version, t, n, rate = struct.unpack("<IIIf", _read_exact(buf, 4, 16, "header"))
    if version != MELF_VERSION:
        raise FormatError(f"{path}: unsupported MELF version {version}")
    data = _read_exact(buf, 20, 4 * t * n, "frames")
    frames = np.frombuffer(data, dtype="<f4").reshape(t, n).astype(np.float64)
    return MelSpectrogram(frames, float(rate))


def save_frames(frames: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    t, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(VIDF_MAGIC)
        fh.write(struct.pack("<III", t, h, w))
        fh.write(arr.tobytes())


def load_frames(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if _read_exact(buf, 0, 4, "magic") != VIDF_MAGIC:
        raise FormatError(f"{path}: not a VIDF file")
    t, h, w = struct.unpack("<III", _read_exact(buf, 4, 12, "header"))
    data = _read_exact(buf, 16, 4 * t * h * w, "frames")
    return np.frombuffer(data, dtype="<f4").reshape(t, h, w).copy()


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")


def write_wav(path, waveform: Waveform) -> None:
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(waveform.sample_rate_hz))
        wf.writeframes(to_pcm16(waveform.samples).tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit mono PCM")
        rate = wf.getframerate()
        data = wf.readframes(wf.getnframes())
    return Waveform(np.frombuffer(data, dtype="<i2") / 32767.0, rate)


def write_units(path, units: dict) -> None:
    """One line per utterance: ``<utt_id> <code> <code> ...``."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, codes in units.items():
            fh.write(utt_id + " " + " ".join(str(int(c)) for c in codes) + "\n")


def read_units(path) -> dict:
    units = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                units[parts[0]] = np.array([int(p) for p in parts[1:]], dtype=np.int64)
    return units
