"""Discrete speech units: 50 Hz proxy SSL features, K-means codebooks, quantization."""

from __future__ import annotations

import hashlib
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.fft import dct

from . import kernels
from .audio import AudioConfig, Waveform, log_mel, stft
from .formats import FormatError

DEFAULT_EXTRACTOR = "cepstral-proxy-v1"
UNCB_MAGIC = b"UNCB"
UNCB_VERSION = 1


@dataclass
class FeatureSequence:
    frames: np.ndarray  # T_u x D
    frame_rate_hz: float = 50.0
    extractor_id: str = DEFAULT_EXTRACTOR


@dataclass
class Codebook:
    centroids: np.ndarray  # K x D
    training_seed: int = 0
    extractor_id: str = DEFAULT_EXTRACTOR

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.extractor_id.encode())
        h.update(np.ascontiguousarray(self.centroids, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class UnitSequence:
    codes: np.ndarray
    frame_rate_hz: float = 50.0

    def __len__(self):
        return len(self.codes)


_EXTRACTORS: dict[str, Callable[[Waveform, AudioConfig], FeatureSequence]] = {}


def register_extractor(name: str):
    """Register a feature extractor ``fn(waveform, cfg) -> FeatureSequence`` at 50 Hz.

    A pretrained SSL model can be plugged in here under its own id; codebooks
    remember which extractor they were fitted on.
    """
    def deco(fn):
        _EXTRACTORS[name] = fn
        return fn
    return deco


def get_extractor(name: str = DEFAULT_EXTRACTOR):
    try:
        return _EXTRACTORS[name]
    except KeyError:
        raise KeyError(f"unknown feature extractor {name!r}; known: {sorted(_EXTRACTORS)}") from None


def _deltas(x: np.ndarray, width: int = 2) -> np.ndarray:
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    num = sum(n * (padded[width + n:len(x) + width + n] - padded[width - n:len(x) + width - n])
              for n in range(1, width + 1))
    return num / (2 * sum(n * n for n in range(1, width + 1)))


@register_extractor(DEFAULT_EXTRACTOR)
def proxy_ssl_features(waveform: Waveform, cfg: AudioConfig = AudioConfig(),
                       n_ceps: int = 13, context: int = 2) -> FeatureSequence:
    """Cepstra c1..c13, their deltas and log-energy per 10 ms, two frames stacked -> 50 Hz."""
    if len(waveform) < cfg.win_samples:
        raise ValueError(f"audio shorter than one analysis window ({cfg.win_samples} samples)")
    mel = log_mel(waveform, cfg).frames
    ceps = dct(mel, type=2, norm="ortho", axis=1)[:, 1:n_ceps + 1]
    power = np.abs(stft(waveform.samples, cfg)) ** 2
    log_e = np.log(power.sum(axis=1) / cfg.n_fft + 1e-10)[:, None]
    per_frame = np.concatenate([ceps, _deltas(ceps), log_e], axis=1)
    t = per_frame.shape[0] // context
    frames = per_frame[: t * context].reshape(t, context * per_frame.shape[1])
    return FeatureSequence(frames, cfg.frame_rate_hz / context, DEFAULT_EXTRACTOR)


def extract_features(waveform: Waveform, cfg: AudioConfig = AudioConfig(),
                     extractor: str = DEFAULT_EXTRACTOR) -> FeatureSequence:
    return get_extractor(extractor)(waveform, cfg)


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, FeatureSequence):
        return features.frames
    if isinstance(features, np.ndarray):
        return features
    return np.concatenate([f.frames if isinstance(f, FeatureSequence) else f for f in features], axis=0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding (D^2 sampling)."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ValueError("not enough distinct points for k-means++ seeding")
        idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        while closest[idx] == 0:  # guard against landing on an already-chosen point
            idx = (idx + 1) % n
        centers[c] = x[idx]
        closest = np.minimum(closest, ((x - centers[c]) ** 2).sum(axis=1))
    return centers


def lloyd(x: np.ndarray, init: np.ndarray, max_iters: int = 100, tol: float = 1e-4):
    """Lloyd iterations from ``init``.

    Returns ``(centroids, labels, distortions)`` where ``distortions[i]`` is the total
    squared error of the i-th assignment. Empty clusters are moved onto the points
    farthest from their current centroid.
    """
    centroids = np.array(init, dtype=np.float64, copy=True)
    k = centroids.shape[0]
    labels, dist = kernels.assign_nearest(x, centroids)
    distortions = [float(dist.sum())]
    for _ in range(max_iters):
        # means are taken relative to one member of each cluster so that a cluster of
        # identical points lands exactly on that point
        anchor = np.zeros(k, dtype=np.int64)
        anchor[labels[::-1]] = np.arange(len(labels))[::-1]
        ref = x[anchor]
        sums, counts = kernels.centroid_sums(x - ref[labels], labels, k)
        empty = np.flatnonzero(counts == 0)
        nonempty = counts > 0
        centroids[nonempty] = ref[nonempty] + sums[nonempty] / counts[nonempty, None]
        if len(empty):
            far = np.argsort(-dist, kind="stable")[: len(empty)]
            centroids[empty] = x[far]
        new_labels, dist = kernels.assign_nearest(x, centroids)
        distortions.append(float(dist.sum()))
        prev, cur = distortions[-2], distortions[-1]
        changed = not np.array_equal(new_labels, labels)
        labels = new_labels
        if not changed and not len(empty):
            break
        if prev > 0 and (prev - cur) / prev < tol:
            break
        if prev == 0:
            break
    return centroids, labels, distortions


def kmeans_fit(features, K: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-4,
               extractor_id: str | None = None) -> Codebook:
    x = np.ascontiguousarray(_as_matrix(features), dtype=np.float64)
    if K < 1:
        raise ValueError("K must be >= 1")
    if x.shape[0] < K:
        raise ValueError(f"need at least K={K} frames, got {x.shape[0]}")
    if len(np.unique(x, axis=0)) < K:
        raise ValueError(f"fewer than K={K} distinct feature vectors")
    if extractor_id is None:
        first = features[0] if isinstance(features, (list, tuple)) else features
        extractor_id = getattr(first, "extractor_id", DEFAULT_EXTRACTOR)
    rng = np.random.default_rng(seed)
    init = kmeans_pp_init(x, K, rng)
    centroids, _, _ = lloyd(x, init, max_iters, tol)
    return Codebook(centroids, seed, extractor_id)


def quantize(features, codebook: Codebook) -> UnitSequence:
    x = _as_matrix(features)
    if x.shape[1] != codebook.feature_dim:
        raise ValueError(f"feature dim {x.shape[1]} != codebook dim {codebook.feature_dim}")
    labels, _ = kernels.assign_nearest(x, codebook.centroids)
    rate = features.frame_rate_hz if isinstance(features, FeatureSequence) else 50.0
    return UnitSequence(labels, rate)


def codebook_save(cb: Codebook, path) -> None:
    ident = cb.extractor_id.encode("utf-8")
    body = bytearray()
    body += UNCB_MAGIC
    body += struct.pack("<IIIqH", UNCB_VERSION, cb.K, cb.feature_dim, cb.training_seed, len(ident))
    body += ident
    body += np.ascontiguousarray(cb.centroids, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def codebook_load(path, active_extractor: str | None = None) -> Codebook:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != UNCB_MAGIC:
        raise FormatError(f"{path}: not a UNCB codebook")
    head = struct.calcsize("<IIIqH")
    if len(buf) < 4 + head:
        raise FormatError(f"{path}: truncated header")
    version, k, d, seed, n_id = struct.unpack("<IIIqH", buf[4:4 + head])
    if version != UNCB_VERSION:
        raise FormatError(f"{path}: unsupported UNCB version {version}")
    off = 4 + head
    expected = off + n_id + 8 * k * d + 4
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)} (truncated or corrupt)")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    ident = buf[off:off + n_id].decode("utf-8")
    off += n_id
    centroids = np.frombuffer(buf[off:off + 8 * k * d], dtype="<f8").reshape(k, d).copy()
    if active_extractor is not None and active_extractor != ident:
        warnings.warn(f"codebook was fitted on extractor {ident!r}, active extractor is "
                      f"{active_extractor!r}", UserWarning, stacklevel=2)
    return Codebook(centroids, int(seed), ident)
