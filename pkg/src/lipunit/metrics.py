"""Objective metrics: STOI, ESTOI and token error rates, plus the report container."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from math import gcd

import numpy as np
from scipy.signal import resample_poly

from . import kernels

FS = 10000
N_FRAME = 256
NFFT = 512
NUM_BANDS = 15
MIN_FREQ = 150.0
SEGMENT = 30  # 384 ms of 12.8 ms frames
BETA = -15.0
DYN_RANGE = 40.0
EPS = np.finfo(np.float64).eps
KAISER_BETA = 5.0
REPORT_SCHEMA_VERSION = 1


def resample_to_10k(x: np.ndarray, fs: int) -> np.ndarray:
    """Polyphase resampling with a Kaiser(5.0) window; cutoff at the lower Nyquist
    (scipy's ``resample_poly`` default design)."""
    if fs == FS:
        return np.asarray(x, dtype=np.float64)
    g = gcd(FS, int(fs))
    return resample_poly(np.asarray(x, dtype=np.float64), FS // g, int(fs) // g,
                         window=("kaiser", KAISER_BETA))


def third_octave_bands(fs=FS, nfft=NFFT, num_bands=NUM_BANDS, min_freq=MIN_FREQ) -> np.ndarray:
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _hann(n):
    return np.hanning(n + 2)[1:-1]


def _frames(x, n, hop):
    starts = np.arange(0, len(x) - n + 1, hop)
    return x[starts[:, None] + np.arange(n)[None, :]] * _hann(n)


def _overlap_add(frames, hop):
    n_frames, n = frames.shape
    out = np.zeros((n_frames - 1) * hop + n)
    for i in range(n_frames):
        out[i * hop:i * hop + n] += frames[i]
    return out


def remove_silent_frames(x, y, dyn_range=DYN_RANGE, n=N_FRAME, hop=N_FRAME // 2):
    """Drop frames more than ``dyn_range`` dB below the loudest clean frame (from both signals)."""
    xf, yf = _frames(x, n, hop), _frames(y, n, hop)
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energy > energy.max() - dyn_range
    if keep.sum() == 0:
        raise ValueError("clean signal is silent")
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x):
    spec = np.fft.rfft(_frames(x, N_FRAME, N_FRAME // 2), n=NFFT, axis=1)
    return np.sqrt(third_octave_bands() @ (np.abs(spec) ** 2).T)  # bands x frames


def _prepare(clean, degraded, fs):
    x = getattr(clean, "samples", clean)
    y = getattr(degraded, "samples", degraded)
    fs = getattr(clean, "sample_rate_hz", fs)
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"signals differ in length: {x.shape} vs {y.shape}")
    if not np.any(x):
        raise ValueError("clean signal is silent")
    x, y = resample_to_10k(x, fs), resample_to_10k(y, fs)
    x, y = remove_silent_frames(x, y)
    x_tob, y_tob = _band_envelopes(x), _band_envelopes(y)
    if x_tob.shape[1] < SEGMENT:
        raise ValueError(f"need at least {SEGMENT} non-silent frames ({SEGMENT * 12.8:.0f} ms), "
                         f"got {x_tob.shape[1]}")
    idx = np.arange(SEGMENT, x_tob.shape[1] + 1)[:, None] + np.arange(-SEGMENT, 0)[None, :]
    return x_tob[:, idx].transpose(1, 0, 2), y_tob[:, idx].transpose(1, 0, 2)  # M x J x N


def stoi(clean, degraded, fs: int = 16000) -> float:
    xs, ys = _prepare(clean, degraded, fs)
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    y_prime = np.minimum(ys * alpha, xs * (1 + 10 ** (-BETA / 20)))
    y_prime = y_prime - y_prime.mean(axis=2, keepdims=True)
    xc = xs - xs.mean(axis=2, keepdims=True)
    y_prime /= np.linalg.norm(y_prime, axis=2, keepdims=True) + EPS
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + EPS
    return float(np.sum(xc * y_prime) / (xs.shape[0] * xs.shape[1]))


def _row_col_normalize(seg):
    seg = seg - seg.mean(axis=2, keepdims=True)
    seg = seg / (np.linalg.norm(seg, axis=2, keepdims=True) + EPS)
    seg = seg - seg.mean(axis=1, keepdims=True)
    return seg / (np.linalg.norm(seg, axis=1, keepdims=True) + EPS)


def estoi(clean, degraded, fs: int = 16000) -> float:
    xs, ys = _prepare(clean, degraded, fs)
    xn, yn = _row_col_normalize(xs), _row_col_normalize(ys)
    return float(np.sum(xn * yn) / (SEGMENT * xs.shape[0]))


def edit_distance(reference, hypothesis) -> int:
    vocab = {}
    ref = [vocab.setdefault(t, len(vocab)) for t in reference]
    hyp = [vocab.setdefault(t, len(vocab)) for t in hypothesis]
    return kernels.levenshtein(ref, hyp)


def error_rate(reference, hypothesis) -> float:
    """Levenshtein distance with unit costs divided by the reference length."""
    reference, hypothesis = list(reference), list(hypothesis)
    if not reference:
        raise ValueError("reference must be non-empty")
    return edit_distance(reference, hypothesis) / len(reference)


@dataclass
class MetricsReport:
    per_utterance: list
    mean: dict
    counts: dict
    config: dict = field(default_factory=dict)
    label: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION
    notes: list = field(default_factory=lambda: [
        "PESQ not computed",
        "uer: units re-extracted from synthesized audio vs ground-truth units",
        "wer: phone error rate from a majority unit-to-phone decoder (stand-in for ASR WER)",
    ])

    @classmethod
    def from_rows(cls, rows, config=None, label=""):
        keys = ("stoi", "estoi", "uer", "wer", "head_uer")
        mean = {}
        for k in keys:
            vals = [r[k] for r in rows if r.get(k) is not None]
            mean[k] = float(np.sum(np.array(vals, dtype=np.float64)) / len(vals)) if vals else None
        counts = {"utterances": len(rows), "unit_frames": int(sum(r.get("n_units", 0) for r in rows))}
        return cls(rows, mean, counts, config or {}, label)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def format_table(rows: list[tuple[str, dict]]) -> str:
    """Plain-text table with STOI / ESTOI / UER / WER columns."""
    lines = [f"{'Method':<28} {'STOI':>7} {'ESTOI':>7} {'UER(%)':>7} {'WER(%)':>7}"]
    lines.append("-" * len(lines[0]))
    for name, m in rows:
        def fmt(v, pct=False):
            return "   -   " if v is None else (f"{100 * v:7.1f}" if pct else f"{v:7.3f}")
        lines.append(f"{name:<28} {fmt(m['stoi'])} {fmt(m['estoi'])} {fmt(m['uer'], True)} {fmt(m['wer'], True)}")
    return "\n".join(lines)


def table_csv(rows: list[tuple[str, dict]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "stoi", "estoi", "uer", "wer"])
    for name, m in rows:
        w.writerow([name] + [("" if m[k] is None else f"{m[k]:.6f}") for k in ("stoi", "estoi", "uer", "wer")])
    return buf.getvalue()
