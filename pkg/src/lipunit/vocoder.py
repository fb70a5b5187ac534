"""Stage 2: multi-input vocoder (mel + speech units + speaker embedding -> waveform).

The generator is a compact HiFi-GAN style stack of transposed convolutions and
dilated residual blocks. Training defaults to a reconstruction objective
(multi-resolution STFT + log-mel L1); a single multi-scale discriminator can be
switched on for least-squares adversarial training.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import correlate

from .audio import AudioConfig, MelSpectrogram, Waveform, mel_filterbank


@dataclass
class MelAugmentConfig:
    blur_kernel: int = 9
    blur_sigma_range: tuple = (0.1, 1.0)
    noise_sigma_max: float = 1.0
    apply_prob: float = 1.0

    def violations(self) -> list[str]:
        errs = []
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            errs.append("vocoder.mel_augment.blur_kernel must be a positive odd integer")
        lo, hi = self.blur_sigma_range
        if not 0 < lo <= hi:
            errs.append("vocoder.mel_augment.blur_sigma_range must be positive and ordered")
        if self.noise_sigma_max < 0:
            errs.append("vocoder.mel_augment.noise_sigma_max must be >= 0")
        if not 0 <= self.apply_prob <= 1:
            errs.append("vocoder.mel_augment.apply_prob must be in [0, 1]")
        return errs


@dataclass
class VocoderConfig:
    unit_embed_dim: int = 128
    spk_proj_dim: int = 128
    upsample_factors: tuple = (5, 4, 4, 2)
    channels: int = 128
    resblock_kernel: int = 3
    resblock_dilations: tuple = (1, 3)
    adversarial: bool = False
    seed: int = 0
    use_units: bool = True
    use_speaker: bool = True
    n_mels: int = 80
    unit_vocab: int = 64
    spk_dim: int = 256
    units_per_mel: int = 2
    # training
    steps: int = 2000
    batch_size: int = 4
    segment_frames: int = 32
    lr: float = 1e-3
    lambda_stft: float = 1.0
    lambda_mel: float = 1.0
    lambda_adv: float = 1.0
    lambda_fm: float = 2.0
    augment: bool = True
    mel_augment: MelAugmentConfig = field(default_factory=MelAugmentConfig)

    @property
    def hop_samples(self) -> int:
        return math.prod(self.upsample_factors)

    @property
    def cond_dim(self) -> int:
        return self.n_mels + self.unit_embed_dim * self.use_units + self.spk_proj_dim * self.use_speaker

    def violations(self, hop_samples: int | None = None) -> list[str]:
        errs = self.mel_augment.violations()
        if hop_samples is not None and self.hop_samples != hop_samples:
            errs.append(f"vocoder.upsample_factors multiply to {self.hop_samples}, "
                        f"but the audio hop is {hop_samples} samples")
        if self.segment_frames % self.units_per_mel:
            errs.append("vocoder.segment_frames must be a multiple of the unit stacking factor")
        if self.channels < 2 ** len(self.upsample_factors):
            errs.append("vocoder.channels too small for the number of upsampling stages")
        return errs


# ---------------------------------------------------------------- augmentation

def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size % 2 == 0:
        raise ValueError("blur kernel size must be odd")
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def blur(frames: np.ndarray, sigma: float, size: int = 9) -> np.ndarray:
    """2D Gaussian blur of a log-mel treated as an image (reflect padding)."""
    return correlate(frames, gaussian_kernel(size, sigma), mode="reflect")


def augment_mel(mel: MelSpectrogram, rng: np.random.Generator, cfg: MelAugmentConfig = MelAugmentConfig(),
                blur_sigma: float | None = None, noise_sigma: float | None = None) -> MelSpectrogram:
    """Blur then add Gaussian noise. Draw order: apply coin, blur sigma, noise sigma, noise."""
    if cfg.blur_kernel % 2 == 0:
        raise ValueError("blur kernel size must be odd")
    if rng.random() >= cfg.apply_prob:
        return MelSpectrogram(mel.frames.copy(), mel.frame_rate_hz)
    s_blur = rng.uniform(*cfg.blur_sigma_range)
    s_noise = rng.uniform(0.0, cfg.noise_sigma_max)
    if blur_sigma is not None:
        s_blur = blur_sigma
    if noise_sigma is not None:
        s_noise = noise_sigma
    out = blur(mel.frames, s_blur, cfg.blur_kernel)
    out = out + s_noise * rng.standard_normal(out.shape)
    return MelSpectrogram(out, mel.frame_rate_hz)


# ---------------------------------------------------------------- generator

class ConditioningTables(nn.Module):
    """Unit lookup table and speaker projection feeding the generator."""

    def __init__(self, cfg: VocoderConfig):
        super().__init__()
        self.cfg = cfg
        self.unit_embed = nn.Embedding(cfg.unit_vocab, cfg.unit_embed_dim) if cfg.use_units else None
        self.spk_proj = nn.Linear(cfg.spk_dim, cfg.spk_proj_dim) if cfg.use_speaker else None

    def forward(self, mel, units=None, z_spk=None):
        """mel B x T x 80, units B x T/2, z_spk B x 256 -> B x T x cond_dim."""
        t = mel.shape[1]
        parts = [mel]
        if self.unit_embed is not None:
            if units is None or units.shape[1] * self.cfg.units_per_mel != t:
                got = None if units is None else units.shape[1]
                raise ValueError(f"rate mismatch: {t} mel frames need {t // self.cfg.units_per_mel} "
                                 f"units, got {got}")
            parts.append(self.unit_embed(units.long()).repeat_interleave(self.cfg.units_per_mel, dim=1))
        if self.spk_proj is not None:
            if z_spk is None:
                raise ValueError("speaker embedding required")
            parts.append(self.spk_proj(z_spk)[:, None, :].expand(-1, t, -1))
        return torch.cat(parts, dim=-1)


class ResBlock(nn.Module):
    def __init__(self, channels, kernel, dilations):
        super().__init__()
        self.convs1 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel, dilation=d, padding=d * (kernel - 1) // 2) for d in dilations)
        self.convs2 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel, padding=(kernel - 1) // 2) for _ in dilations)

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            x = x + c2(F.leaky_relu(c1(F.leaky_relu(x, 0.1)), 0.1))
        return x


class Generator(nn.Module):
    def __init__(self, cfg: VocoderConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.conv_pre = nn.Conv1d(cfg.cond_dim, ch, 7, padding=3)
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for u in cfg.upsample_factors:
            # kernel 2u with this padding gives exactly u x the input length
            self.ups.append(nn.ConvTranspose1d(ch, ch // 2, 2 * u, stride=u, padding=u // 2 + u % 2,
                                               output_padding=u % 2))
            ch //= 2
            self.blocks.append(ResBlock(ch, cfg.resblock_kernel, cfg.resblock_dilations))
        self.conv_post = nn.Conv1d(ch, 1, 7, padding=3)
        # small init for the upsampling stack; default init often stalls in a quiet, frame-rate buzz
        for mod in list(self.ups.modules()) + list(self.blocks.modules()):
            if isinstance(mod, (nn.Conv1d, nn.ConvTranspose1d)):
                nn.init.normal_(mod.weight, 0.0, 0.01)

    def forward(self, cond):
        x = self.conv_pre(cond.transpose(1, 2))
        for up, block in zip(self.ups, self.blocks):
            x = block(up(F.leaky_relu(x, 0.1)))
        x = self.conv_post(F.leaky_relu(x, 0.1))
        # the 0.9999 factor keeps |y| < 1 even where float32 tanh rounds to 1
        return 0.9999 * torch.tanh(x[:, 0])


class MultiInputVocoder(nn.Module):
    def __init__(self, cfg: VocoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tables = ConditioningTables(cfg)
        self.generator = Generator(cfg)

    def condition(self, mel, units=None, z_spk=None):
        return self.tables(mel, units, z_spk)

    def forward(self, mel, units=None, z_spk=None):
        return self.generator(self.condition(mel, units, z_spk))


def condition_inputs(mel: MelSpectrogram, units, z_spk, tables: ConditioningTables) -> torch.Tensor:
    """Single-utterance conditioning tensor, T_mel x cond_dim."""
    m = torch.as_tensor(np.asarray(mel.frames, dtype=np.float32))[None]
    u = None if units is None else torch.as_tensor(np.asarray(getattr(units, "codes", units)))[None]
    z = None if z_spk is None else torch.as_tensor(
        np.asarray(getattr(z_spk, "vector", z_spk), dtype=np.float32))[None]
    with torch.no_grad():
        return tables(m, u, z)[0]


@torch.no_grad()
def generate_waveform(cond: torch.Tensor, model: MultiInputVocoder, sample_rate_hz: int = 16000) -> Waveform:
    if cond.dim() == 2:
        cond = cond[None]
    if cond.shape[-1] != model.cfg.cond_dim:
        raise ValueError(f"conditioning width {cond.shape[-1]} != {model.cfg.cond_dim}")
    model.eval()
    y = model.generator(cond)[0]
    return Waveform(y.numpy().astype(np.float64), sample_rate_hz)


def vocode(model: MultiInputVocoder, mel: MelSpectrogram, units=None, z_spk=None,
           sample_rate_hz: int = 16000) -> Waveform:
    cond = condition_inputs(mel, units if model.cfg.use_units else None,
                            z_spk if model.cfg.use_speaker else None, model.tables)
    return generate_waveform(cond, model, sample_rate_hz)


# ---------------------------------------------------------------- discriminator (optional)

class ScaleDiscriminator(nn.Module):
    def __init__(self, ch=16):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv1d(1, ch, 15, padding=7),
            nn.Conv1d(ch, 2 * ch, 41, stride=4, groups=4, padding=20),
            nn.Conv1d(2 * ch, 4 * ch, 41, stride=4, groups=8, padding=20),
            nn.Conv1d(4 * ch, 4 * ch, 5, padding=2),
        ])
        self.post = nn.Conv1d(4 * ch, 1, 3, padding=1)

    def forward(self, x):
        feats = []
        x = x[:, None]
        for c in self.convs:
            x = F.leaky_relu(c(x), 0.1)
            feats.append(x)
        return self.post(x).flatten(1), feats


class MultiScaleDiscriminator(nn.Module):
    """Waveform-only discriminator at full and half resolution."""

    def __init__(self):
        super().__init__()
        self.discs = nn.ModuleList([ScaleDiscriminator(), ScaleDiscriminator()])

    def forward(self, y):
        outs = []
        for i, d in enumerate(self.discs):
            if i:
                y = F.avg_pool1d(y[:, None], 4, 2, padding=2)[:, 0]
            outs.append(d(y))
        return outs


# ---------------------------------------------------------------- losses

_RESOLUTIONS = ((512, 128, 512), (1024, 256, 1024), (256, 64, 256))


def _stft_mag(x, n_fft, hop, win):
    window = torch.hann_window(win, dtype=x.dtype)
    spec = torch.stft(x, n_fft, hop, win, window, center=True, return_complex=True)
    return spec.abs().clamp_min(1e-7)


def multi_resolution_stft_loss(pred, target):
    loss = 0.0
    for n_fft, hop, win in _RESOLUTIONS:
        p, t = _stft_mag(pred, n_fft, hop, win), _stft_mag(target, n_fft, hop, win)
        sc = torch.linalg.norm(t - p) / torch.linalg.norm(t)
        mag = (torch.log(t) - torch.log(p)).abs().mean()
        loss = loss + sc + mag
    return loss / len(_RESOLUTIONS)


@lru_cache(maxsize=4)
def _fb_tensor(cfg: AudioConfig):
    return torch.from_numpy(np.ascontiguousarray(mel_filterbank(cfg), dtype=np.float32))


def torch_log_mel(x, cfg: AudioConfig = AudioConfig()):
    """Differentiable twin of :func:`lipunit.audio.log_mel` (B x N -> B x T x n_mels)."""
    pad = (cfg.win_samples - cfg.hop_samples) // 2
    xp = F.pad(x[:, None], (pad, pad), mode="reflect")[:, 0]
    window = torch.hann_window(cfg.win_samples, periodic=True, dtype=x.dtype)
    spec = torch.stft(xp, cfg.n_fft, cfg.hop_samples, cfg.win_samples, window, center=False,
                      return_complex=True)
    mel = torch.matmul(_fb_tensor(cfg).to(x.dtype), spec.abs())
    return torch.log(mel.clamp_min(cfg.log_floor)).transpose(1, 2)


# ---------------------------------------------------------------- data / training

@dataclass
class VocoderItem:
    utt_id: str
    mel: np.ndarray    # T x 80
    units: np.ndarray  # T / 2
    z_spk: np.ndarray  # 256
    audio: np.ndarray  # T * hop


def make_vocoder_items(manifest, units: dict, speaker_embed, records=None, hop: int = 160):
    items = []
    for rec in records if records is not None else manifest:
        mel = manifest.mel(rec).frames
        audio = manifest.wav(rec).samples
        codes = np.asarray(units[rec.utt_id])
        if len(codes) * 2 != mel.shape[0] or len(audio) != mel.shape[0] * hop:
            raise ValueError(f"{rec.utt_id}: mel/unit/audio lengths do not align")
        items.append(VocoderItem(rec.utt_id, mel, codes, speaker_embed(rec.speaker_id).astype(np.float32),
                                 audio.astype(np.float32)))
    return items


def vocoder_batches(items, cfg: VocoderConfig, rng: np.random.Generator, hop: int = 160):
    """Endless stream of ``(mel_in, units, z_spk, audio)`` training crops."""
    seg = cfg.segment_frames
    upm = cfg.units_per_mel
    while True:
        picks = rng.choice(len(items), cfg.batch_size, replace=len(items) < cfg.batch_size)
        mels, units, zs, audio = [], [], [], []
        for i in picks:
            it = items[int(i)]
            mel = it.mel
            if cfg.augment:
                mel = augment_mel(MelSpectrogram(mel), rng, cfg.mel_augment).frames
            n_starts = (mel.shape[0] - seg) // upm + 1
            if n_starts < 1:
                raise ValueError(f"{it.utt_id}: shorter than one training segment")
            s = int(rng.integers(n_starts)) * upm
            mels.append(mel[s:s + seg])
            units.append(it.units[s // upm:(s + seg) // upm])
            zs.append(it.z_spk)
            audio.append(it.audio[s * hop:(s + seg) * hop])
        yield (torch.from_numpy(np.stack(mels).astype(np.float32)),
               torch.from_numpy(np.stack(units).astype(np.int64)),
               torch.from_numpy(np.stack(zs).astype(np.float32)),
               torch.from_numpy(np.stack(audio).astype(np.float32)))


def _disc_loss(disc, real, fake):
    loss = 0.0
    for (r_out, _), (f_out, _) in zip(disc(real), disc(fake.detach())):
        loss = loss + ((r_out - 1) ** 2).mean() + (f_out ** 2).mean()
    return loss


def _gen_adv_losses(disc, real, fake):
    g_adv, fm = 0.0, 0.0
    for (r_out, r_feats), (f_out, f_feats) in zip(disc(real), disc(fake)):
        g_adv = g_adv + ((f_out - 1) ** 2).mean()
        fm = fm + sum((rf.detach() - ff).abs().mean() for rf, ff in zip(r_feats, f_feats))
    return g_adv, fm


def train_vocoder(items, cfg: VocoderConfig, steps: int | None = None, audio_cfg: AudioConfig = AudioConfig(),
                  resume: dict | None = None, history: list | None = None):
    """Reconstruction (optionally adversarial) training on ground-truth features.

    ``resume`` is a state dict from :func:`vocoder_state`; training continues
    from its step count up to ``steps``. Returns ``(model, history, state)``.
    """
    steps = cfg.steps if steps is None else steps
    torch.manual_seed(cfg.seed)
    model = MultiInputVocoder(cfg)
    disc = MultiScaleDiscriminator() if cfg.adversarial else None
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.8, 0.99))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.8, 0.99)) if disc else None
    rng = np.random.default_rng([cfg.seed, 13])
    start = 0
    history = [] if history is None else history
    if resume is not None:
        model.load_state_dict(resume["state_dict"])
        opt.load_state_dict(resume["optimizer"])
        if disc is not None and resume.get("disc") is not None:
            disc.load_state_dict(resume["disc"])
            opt_d.load_state_dict(resume["disc_optimizer"])
        rng.bit_generator.state = resume["rng_state"]
        torch.set_rng_state(resume["torch_rng_state"])
        start = resume["step"]
        history = list(resume.get("history", []))
    batches = vocoder_batches(items, cfg, rng, audio_cfg.hop_samples)
    model.train()
    # the schedule spans the planned run, so stopping early and resuming retraces it exactly
    horizon = max(cfg.steps, steps, 1)
    for step in range(start, steps):
        for group in opt.param_groups:
            group["lr"] = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / horizon))
        mel, units, z, audio = next(batches)
        fake = model(mel, units if cfg.use_units else None, z if cfg.use_speaker else None)
        l_stft = multi_resolution_stft_loss(fake, audio)
        l_mel = (torch_log_mel(fake, audio_cfg) - torch_log_mel(audio, audio_cfg)).abs().mean()
        loss = cfg.lambda_stft * l_stft + cfg.lambda_mel * l_mel
        row = {"step": step, "l_stft": l_stft.item(), "l_mel": l_mel.item()}
        if disc is not None:
            d_loss = _disc_loss(disc, audio, fake)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            # generator terms go through the updated discriminator
            g_adv, fm = _gen_adv_losses(disc, audio, fake)
            loss = loss + cfg.lambda_adv * g_adv + cfg.lambda_fm * fm
            row.update(l_disc=d_loss.item(), l_adv=g_adv.item(), l_fm=fm.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        row["l_total"] = loss.item()
        history.append(row)
    model.eval()
    state = vocoder_state(model, opt, rng, steps if steps > start else start, history, disc, opt_d)
    return model, history, state


def vocoder_state(model, opt, rng, step, history, disc=None, opt_d=None) -> dict:
    return {"format": "lipunit-vocoder", "version": 1, "config": asdict(model.cfg),
            "state_dict": model.state_dict(), "optimizer": opt.state_dict(),
            "disc": disc.state_dict() if disc is not None else None,
            "disc_optimizer": opt_d.state_dict() if opt_d is not None else None,
            "rng_state": rng.bit_generator.state, "torch_rng_state": torch.get_rng_state(),
            "step": step, "history": history}


def _cfg_from_dict(d) -> VocoderConfig:
    kwargs = {}
    for f in fields(VocoderConfig):
        if f.name in d:
            v = d[f.name]
            if f.name == "mel_augment" and isinstance(v, dict):
                v = MelAugmentConfig(**{**v, "blur_sigma_range": tuple(v["blur_sigma_range"])})
            elif isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
    return VocoderConfig(**kwargs)


def save_vocoder(state: dict, path, meta: dict | None = None) -> None:
    torch.save({**state, "meta": meta or {}}, path)


def load_vocoder_state(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") != "lipunit-vocoder":
        raise ValueError(f"{path}: not a vocoder checkpoint")
    return state


def load_vocoder(path) -> MultiInputVocoder:
    state = load_vocoder_state(path)
    model = MultiInputVocoder(_cfg_from_dict(state["config"]))
    model.load_state_dict(state["state_dict"])
    model.meta = state.get("meta", {})
    model.eval()
    return model
