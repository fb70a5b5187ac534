"""Stage 1: multi-target lip-to-speech model.

Silent lip frames -> per-frame visual features -> temporal repetition to the
50 Hz unit rate -> Conformer -> (stacked mel via a speaker-conditioned 1D CNN,
unit logits via a speaker-free MLP).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import StackedMel, stack_mel, unstack_mel
from .units import UnitSequence


@dataclass
class VideoAugmentConfig:
    crop_size: int = 20
    flip_p: float = 0.5
    erase_p: float = 0.5
    erase_max_area: float = 0.25
    time_mask_p: float = 0.5
    time_mask_max_frac: float = 0.1


@dataclass
class L2SConfig:
    conformer_layers: int = 4
    attention_heads: int = 4
    conv_kernel: int = 31
    latent_dim: int = 144
    interleave_ratio: int = 2
    unit_vocab: int = 64
    mel_stack_dim: int = 160
    dropout: float = 0.1
    seed: int = 0
    frontend_channels: int = 32
    spk_dim: int = 256
    spk_proj_dim: int = 64
    mel_head_channels: int = 256
    mel_head_kernel: int = 5
    unit_head_hidden: int = 256
    ff_mult: int = 4
    # training
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    lambda_mel: float = 10.0
    lambda_unit: float = 1.0
    grad_clip: float = 5.0
    augment: bool = True
    video_augment: VideoAugmentConfig = field(default_factory=VideoAugmentConfig)

    def violations(self) -> list[str]:
        errs = []
        if self.latent_dim % self.attention_heads:
            errs.append("l2s.latent_dim must be divisible by l2s.attention_heads")
        if self.interleave_ratio < 1:
            errs.append("l2s.interleave_ratio must be >= 1")
        if self.conv_kernel % 2 == 0:
            errs.append("l2s.conv_kernel must be odd")
        if self.lambda_mel < 0 or self.lambda_unit < 0:
            errs.append("l2s loss weights must be non-negative")
        if self.unit_vocab < 1:
            errs.append("l2s.unit_vocab must be >= 1")
        return errs


@dataclass
class L2SOutput:
    mel_stacked_pred: torch.Tensor  # B x T_u x 160
    unit_logits: torch.Tensor       # B x T_u x K
    mask: torch.Tensor              # B x T_u, True on real frames


# ---------------------------------------------------------------- augmentation

def center_crop(frames: np.ndarray, size: int) -> np.ndarray:
    h, w = frames.shape[-2:]
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than frame {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return frames[..., top:top + size, left:left + size]


def hflip(frames: np.ndarray) -> np.ndarray:
    return frames[..., ::-1].copy()


def random_erase(frames: np.ndarray, rng: np.random.Generator, max_area: float = 0.25):
    """Zero one rectangle (same for every frame). Returns ``(frames, (top, left, h, w))``."""
    _, h, w = frames.shape
    area = rng.uniform(0.02, max_area) * h * w
    aspect = math.exp(rng.uniform(math.log(0.3), math.log(3.3)))
    eh = int(min(h, max(1, round(math.sqrt(area * aspect)))))
    ew = int(min(w, max(1, round(math.sqrt(area / aspect)))))
    while eh * ew > max_area * h * w and (eh > 1 or ew > 1):
        if eh >= ew:
            eh -= 1
        else:
            ew -= 1
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    out = frames.copy()
    out[:, top:top + eh, left:left + ew] = 0.0
    return out, (top, left, eh, ew)


def time_mask(frames: np.ndarray, rng: np.random.Generator, max_frac: float = 0.1):
    t = frames.shape[0]
    length = int(rng.integers(1, max(1, int(max_frac * t)) + 1))
    start = int(rng.integers(0, t - length + 1))
    out = frames.copy()
    out[start:start + length] = 0.0
    return out, (start, length)


def augment_video(frames: np.ndarray, rng: np.random.Generator | None,
                  cfg: VideoAugmentConfig = VideoAugmentConfig(), train: bool = True) -> np.ndarray:
    """Training: random crop, flip, erasing, time masking. Evaluation: center crop only."""
    frames = np.asarray(frames, dtype=np.float32)
    h, w = frames.shape[-2:]
    if cfg.crop_size > h or cfg.crop_size > w:
        raise ValueError(f"crop {cfg.crop_size} larger than frame {h}x{w}")
    if not train or rng is None:
        return np.ascontiguousarray(center_crop(frames, cfg.crop_size))
    top = int(rng.integers(0, h - cfg.crop_size + 1))
    left = int(rng.integers(0, w - cfg.crop_size + 1))
    out = frames[:, top:top + cfg.crop_size, left:left + cfg.crop_size].copy()
    if rng.random() < cfg.flip_p:
        out = hflip(out)
    if rng.random() < cfg.erase_p:
        out, _ = random_erase(out, rng, cfg.erase_max_area)
    if rng.random() < cfg.time_mask_p:
        out, _ = time_mask(out, rng, cfg.time_mask_max_frac)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------- network

class VisualFrontend(nn.Module):
    """Small strided conv stack applied frame by frame."""

    min_size = 12

    def __init__(self, latent_dim: int, channels: int = 32):
        super().__init__()
        c = channels
        self.convs = nn.Sequential(
            nn.Conv2d(1, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(3),
        )
        self.proj = nn.Linear(2 * c * 9, latent_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 4:
            raise ValueError("expected frames of shape B x T x H x W")
        b, t, h, w = frames.shape
        if h < self.min_size or w < self.min_size:
            raise ValueError(f"frames must be at least {self.min_size}x{self.min_size}, got {h}x{w}")
        x = self.convs(frames.reshape(b * t, 1, h, w)).flatten(1)
        return self.proj(x).reshape(b, t, -1)


def interleave(features: torch.Tensor, ratio: int) -> torch.Tensor:
    """Repeat each time step ``ratio`` times: [a, b] -> [a, a, b, b]."""
    if ratio <= 0:
        raise ValueError("interleave ratio must be >= 1")
    return features.repeat_interleave(ratio, dim=1)


def sinusoidal_positions(t: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(t, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(t, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe.to(dtype)


class FeedForward(nn.Module):
    def __init__(self, d, mult, dropout):
        super().__init__()
        self.net = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, mult * d), nn.SiLU(), nn.Dropout(dropout),
                                 nn.Linear(mult * d, d), nn.Dropout(dropout))

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    def __init__(self, d, kernel, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.pointwise_in = nn.Conv1d(d, 2 * d, 1)
        self.depthwise = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d)
        # LayerNorm rather than BatchNorm keeps padded batches exact
        self.mid_norm = nn.LayerNorm(d)
        self.pointwise_out = nn.Conv1d(d, d, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        y = self.norm(x).transpose(1, 2)
        y = F.glu(self.pointwise_in(y), dim=1)
        y = y.masked_fill(~mask[:, None, :], 0.0)
        y = self.depthwise(y).transpose(1, 2)
        y = F.silu(self.mid_norm(y)).transpose(1, 2)
        return self.dropout(self.pointwise_out(y).transpose(1, 2))


class ConformerBlock(nn.Module):
    def __init__(self, d, heads, kernel, ff_mult=4, dropout=0.1):
        super().__init__()
        self.ff1 = FeedForward(d, ff_mult, dropout)
        self.attn_norm = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.attn_dropout = nn.Dropout(dropout)
        self.conv = ConvModule(d, kernel, dropout)
        self.ff2 = FeedForward(d, ff_mult, dropout)
        self.out_norm = nn.LayerNorm(d)

    def forward(self, x, mask):
        x = x + 0.5 * self.ff1(x)
        y = self.attn_norm(x)
        y, _ = self.attn(y, y, y, key_padding_mask=~mask, need_weights=False)
        x = x + self.attn_dropout(y)
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class ConformerEncoder(nn.Module):
    def __init__(self, d, layers, heads, kernel, ff_mult=4, dropout=0.1):
        super().__init__()
        self.blocks = nn.ModuleList(ConformerBlock(d, heads, kernel, ff_mult, dropout) for _ in range(layers))

    def forward(self, x, mask=None):
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        return x


class MelHead(nn.Module):
    """Speaker-specific predictor: 1D CNN over [z_v || projected z_spk]."""

    def __init__(self, cfg: L2SConfig):
        super().__init__()
        self.spk_proj = nn.Linear(cfg.spk_dim, cfg.spk_proj_dim)
        k = cfg.mel_head_kernel
        self.conv1 = nn.Conv1d(cfg.latent_dim + cfg.spk_proj_dim, cfg.mel_head_channels, k, padding=k // 2)
        self.conv2 = nn.Conv1d(cfg.mel_head_channels, cfg.mel_stack_dim, k, padding=k // 2)

    def forward(self, z_v, z_spk, mask):
        if z_spk.shape[-1] != self.spk_proj.in_features:
            raise ValueError(f"speaker embedding dim {z_spk.shape[-1]} != {self.spk_proj.in_features}")
        spk = self.spk_proj(z_spk)[:, None, :].expand(-1, z_v.shape[1], -1)
        x = torch.cat([z_v, spk], dim=-1).masked_fill(~mask[..., None], 0.0).transpose(1, 2)
        x = F.silu(self.conv1(x)).masked_fill(~mask[:, None, :], 0.0)
        return self.conv2(x).transpose(1, 2)


class UnitHead(nn.Module):
    """Speaker-agnostic predictor: MLP on z_v only."""

    def __init__(self, cfg: L2SConfig):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cfg.latent_dim, cfg.unit_head_hidden), nn.ReLU(),
                                 nn.Linear(cfg.unit_head_hidden, cfg.unit_vocab))

    def forward(self, z_v):
        return self.net(z_v)


class L2SModel(nn.Module):
    def __init__(self, cfg: L2SConfig):
        super().__init__()
        errs = cfg.violations()
        if errs:
            raise ValueError("; ".join(errs))
        self.cfg = cfg
        self.frontend = VisualFrontend(cfg.latent_dim, cfg.frontend_channels)
        self.encoder = ConformerEncoder(cfg.latent_dim, cfg.conformer_layers, cfg.attention_heads,
                                        cfg.conv_kernel, cfg.ff_mult, cfg.dropout)
        self.mel_head = MelHead(cfg)
        self.unit_head = UnitHead(cfg)

    def encode(self, frames, video_lengths=None):
        """Return ``(z_v, mask)`` at the unit rate."""
        b, t_v = frames.shape[:2]
        feats = interleave(self.frontend(frames), self.cfg.interleave_ratio)
        mask = _length_mask(video_lengths, b, t_v, frames.device) if video_lengths is not None else \
            torch.ones(b, t_v, dtype=torch.bool, device=frames.device)
        mask = mask.repeat_interleave(self.cfg.interleave_ratio, dim=1)
        return self.encoder(feats, mask), mask

    def predict_targets(self, z_v, z_spk, mask=None) -> L2SOutput:
        if mask is None:
            mask = torch.ones(z_v.shape[:2], dtype=torch.bool, device=z_v.device)
        return L2SOutput(self.mel_head(z_v, z_spk, mask), self.unit_head(z_v), mask)

    def forward(self, frames, z_spk, video_lengths=None) -> L2SOutput:
        z_v, mask = self.encode(frames, video_lengths)
        return self.predict_targets(z_v, z_spk, mask)


def _length_mask(lengths, b, t, device):
    lengths = torch.as_tensor(lengths, device=device)
    return torch.arange(t, device=device)[None, :] < lengths[:, None]


# ---------------------------------------------------------------- losses

def loss_mel(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute error over all (unmasked) elements."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    err = (pred - target).abs()
    if mask is None:
        return err.mean()
    m = mask[..., None].to(err.dtype)
    return (err * m).sum() / (m.sum() * err.shape[-1])


def loss_unit(logits: torch.Tensor, units: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of the true unit per frame."""
    k = logits.shape[-1]
    if units.numel() and (int(units.min()) < 0 or int(units.max()) >= k):
        raise ValueError(f"unit ids must lie in [0, {k})")
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, units.long()[..., None])[..., 0]
    if mask is None:
        return nll.mean()
    m = mask.to(nll.dtype)
    return (nll * m).sum() / m.sum()


def loss_total(l_mel, l_unit, lambda_mel: float = 10.0, lambda_unit: float = 1.0):
    if lambda_mel < 0 or lambda_unit < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_mel * l_mel + lambda_unit * l_unit


# ---------------------------------------------------------------- data

@dataclass
class L2SItem:
    utt_id: str
    frames: np.ndarray       # T_v x H x W
    mel_stacked: np.ndarray  # T_u x 160
    units: np.ndarray        # T_u
    z_spk: np.ndarray        # 256


def make_items(manifest, units: dict, speaker_embed, records=None, stack_factor: int = 2,
               interleave_ratio: int = 2) -> list[L2SItem]:
    items = []
    for rec in records if records is not None else manifest:
        frames = manifest.frames(rec)
        stacked = stack_mel(manifest.mel(rec), stack_factor).frames
        codes = units[rec.utt_id]
        if not (len(codes) == stacked.shape[0] == interleave_ratio * frames.shape[0]):
            raise ValueError(f"{rec.utt_id}: rate lattice violated (video {frames.shape[0]}, "
                             f"mel/{stack_factor} {stacked.shape[0]}, units {len(codes)})")
        items.append(L2SItem(rec.utt_id, frames, stacked.astype(np.float32), np.asarray(codes),
                             speaker_embed(rec.speaker_id).astype(np.float32)))
    return items


def collate(items, rng=None, aug: VideoAugmentConfig = VideoAugmentConfig(), train=False):
    t_v = max(it.frames.shape[0] for it in items)
    t_u = max(len(it.units) for it in items)
    crop = aug.crop_size
    frames = np.zeros((len(items), t_v, crop, crop), dtype=np.float32)
    mel = np.zeros((len(items), t_u, items[0].mel_stacked.shape[1]), dtype=np.float32)
    units = np.zeros((len(items), t_u), dtype=np.int64)
    lengths = np.zeros(len(items), dtype=np.int64)
    for i, it in enumerate(items):
        n = it.frames.shape[0]
        frames[i, :n] = augment_video(it.frames, rng, aug, train=train)
        mel[i, :len(it.units)] = it.mel_stacked
        units[i, :len(it.units)] = it.units
        lengths[i] = n
    z = np.stack([it.z_spk for it in items])
    return (torch.from_numpy(frames), torch.from_numpy(z), torch.from_numpy(lengths),
            torch.from_numpy(mel), torch.from_numpy(units))


# ---------------------------------------------------------------- training / inference

def cosine_lr(step: int, total: int, base: float) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


def train_l2s(items: list[L2SItem], cfg: L2SConfig, steps: int | None = None, log_path=None,
              codebook_hash: str | None = None, model: L2SModel | None = None):
    """Train with Adam and a cosine-decayed step size. Returns ``(model, history)``."""
    steps = cfg.steps if steps is None else steps
    torch.manual_seed(cfg.seed)
    model = model or L2SModel(cfg)
    rng = np.random.default_rng([cfg.seed, 11])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    model.train()
    try:
        for step in range(steps):
            for group in opt.param_groups:
                group["lr"] = cosine_lr(step, steps, cfg.lr)
            if len(items) <= cfg.batch_size:
                batch = items
            else:
                batch = [items[i] for i in rng.choice(len(items), cfg.batch_size, replace=False)]
            frames, z, lengths, mel, units = collate(batch, rng, cfg.video_augment, train=cfg.augment)
            out = model(frames, z, lengths)
            l_mel = loss_mel(out.mel_stacked_pred, mel, out.mask)
            l_unit = loss_unit(out.unit_logits, units, out.mask)
            total = loss_total(l_mel, l_unit, cfg.lambda_mel, cfg.lambda_unit)
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            row = {"step": step, "l_mel": l_mel.item(), "l_unit": l_unit.item(), "l_total": total.item()}
            history.append(row)
            if log:
                log.write(json.dumps(row) + "\n")
    finally:
        if log:
            log.close()
    model.eval()
    model.codebook_hash = codebook_hash
    return model, history


@torch.no_grad()
def predict_items(model: L2SModel, items, batch_size: int = 16):
    """Eval-mode predictions per item: list of (stacked mel T_u x 160, unit codes T_u)."""
    model.eval()
    out = []
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        frames, z, lengths, _, _ = collate(chunk, None, model.cfg.video_augment, train=False)
        res = model(frames, z, lengths)
        for j, it in enumerate(chunk):
            n = len(it.units)
            out.append((res.mel_stacked_pred[j, :n].numpy().astype(np.float64),
                        res.unit_logits[j, :n].argmax(-1).numpy()))
    return out


def unit_accuracy(model: L2SModel, items) -> float:
    preds = predict_items(model, items)
    hits = sum(int((p[1] == it.units).sum()) for p, it in zip(preds, items))
    return hits / sum(len(it.units) for it in items)


@torch.no_grad()
def infer_l2s(model: L2SModel, frames, z_spk, codebook=None, stack_factor: int = 2):
    """Video (T_v x H x W) + speaker embedding -> (100 Hz MelSpectrogram, 50 Hz UnitSequence)."""
    if codebook is not None and codebook.K != model.cfg.unit_vocab:
        raise ValueError(f"checkpoint predicts {model.cfg.unit_vocab} units, codebook has {codebook.K}")
    frames = getattr(frames, "frames", frames)
    z_spk = getattr(z_spk, "vector", z_spk)
    model.eval()
    x = torch.from_numpy(augment_video(frames, None, model.cfg.video_augment, train=False))[None]
    z = torch.as_tensor(np.asarray(z_spk, dtype=np.float32))[None]
    out = model(x, z)
    stacked = StackedMel(out.mel_stacked_pred[0].numpy().astype(np.float64), stack_factor, 50.0)
    return unstack_mel(stacked), UnitSequence(out.unit_logits[0].argmax(-1).numpy(), 50.0)


def _config_from_dict(cls, d):
    kwargs = {}
    for f in fields(cls):
        if f.name in d:
            v = d[f.name]
            if f.name == "video_augment" and isinstance(v, dict):
                v = VideoAugmentConfig(**v)
            kwargs[f.name] = v
    return cls(**kwargs)


def save_l2s(model: L2SModel, path, meta: dict | None = None) -> None:
    torch.save({"format": "lipunit-l2s", "version": 1, "config": asdict(model.cfg),
                "state_dict": model.state_dict(), "codebook_hash": getattr(model, "codebook_hash", None),
                "meta": meta or {}}, path)


def load_l2s(path) -> L2SModel:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != "lipunit-l2s":
        raise ValueError(f"{path}: not an L2S checkpoint")
    model = L2SModel(_config_from_dict(L2SConfig, ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.codebook_hash = ckpt.get("codebook_hash")
    model.meta = ckpt.get("meta", {})
    model.eval()
    return model
