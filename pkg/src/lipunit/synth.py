"""Synthetic audio-visual corpus.

Speech comes from a source-filter formant synthesizer; video is a rendered
parametric mouth (ellipse) following the articulation of each phone. Some
phones share articulation but differ acoustically (homophenes), so the video
alone cannot tell them apart.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import AudioConfig, Waveform, log_mel
from .formats import read_wav, save_frames, save_mel, write_wav, load_frames, load_mel

VIDEO_FRAME_MS = 40
VIDEO_RATE_HZ = 25.0
EMBED_DIM = 256
_EMBED_SALT = 0x5EED5
_SPEAKER_SALT = 0x5BEA4


@dataclass(frozen=True)
class PhoneSpec:
    symbol: str
    formants_hz: tuple
    articulation: tuple  # (aperture, width, protrusion), each in [0, 1]
    voiced: bool
    level: float = 1.0  # relative RMS before peak normalization

    def __post_init__(self):
        f = self.formants_hz
        if len(f) != 3 or not (0 < f[0] < f[1] < f[2]):
            raise ValueError(f"{self.symbol}: formants must be 3 strictly increasing values")
        if len(self.articulation) != 3 or not all(0.0 <= a <= 1.0 for a in self.articulation):
            raise ValueError(f"{self.symbol}: articulation must lie in the unit cube")


_LABIAL = (0.0, 0.55, 0.35)
_LABIODENTAL = (0.12, 0.6, 0.1)

PHONES = {p.symbol: p for p in [
    PhoneSpec("aa", (730, 1090, 2440), (0.9, 0.6, 0.2), True),
    PhoneSpec("ii", (270, 2290, 3010), (0.25, 0.95, 0.05), True),
    PhoneSpec("uu", (300, 870, 2240), (0.3, 0.25, 0.95), True),
    PhoneSpec("eh", (530, 1840, 2480), (0.6, 0.75, 0.3), True),
    PhoneSpec("oo", (570, 840, 2410), (0.6, 0.4, 0.75), True),
    PhoneSpec("p", (600, 1500, 2800), _LABIAL, False, 0.35),
    PhoneSpec("b", (250, 800, 2200), _LABIAL, True, 0.5),
    PhoneSpec("f", (1400, 2600, 3600), _LABIODENTAL, False, 0.3),
    PhoneSpec("v", (300, 1400, 2400), _LABIODENTAL, True, 0.45),
    PhoneSpec("m", (260, 1000, 2250), (0.0, 0.45, 0.6), True, 0.5),
    PhoneSpec("s", (2600, 4300, 5800), (0.2, 0.8, 0.0), False, 0.3),
    PhoneSpec("sh", (1800, 2700, 4000), (0.3, 0.5, 0.85), False, 0.35),
]}

HOMOPHENES = {"p": "b", "b": "p", "f": "v", "v": "f"}
VOWELS = ("aa", "ii", "uu", "eh", "oo")
CONSONANTS = ("p", "b", "f", "v", "m", "s", "sh")
# Phonotactics that let context resolve homophenes: voiced labials only before back vowels.
_VOWELS_AFTER = {"b": ("uu", "oo"), "v": ("uu", "oo"), "p": ("ii", "eh", "aa"), "f": ("ii", "eh", "aa")}


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: int
    f0_hz: float
    formant_scale: float
    amplitude: float = 1.0

    def __post_init__(self):
        if self.f0_hz <= 0 or self.formant_scale <= 0:
            raise ValueError("f0_hz and formant_scale must be positive")


def make_speaker(speaker_id: int, seed: int = 0) -> SpeakerSpec:
    rng = np.random.default_rng([_SPEAKER_SALT, seed, speaker_id])
    return SpeakerSpec(speaker_id, float(rng.uniform(90, 250)), float(rng.uniform(0.85, 1.2)),
                       float(rng.uniform(0.5, 1.0)))


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    speaker_id: int


def speaker_embedding(speaker) -> SpeakerEmbedding:
    """Stand-in for a d-vector: seeded Gaussian draw, L2-normalized, 256 dims."""
    sid = speaker.speaker_id if isinstance(speaker, SpeakerSpec) else int(speaker)
    v = np.random.default_rng([_EMBED_SALT, sid]).standard_normal(EMBED_DIM)
    return SpeakerEmbedding(v / np.linalg.norm(v), sid)


@dataclass
class VisualSequence:
    frames: np.ndarray  # T_v x H x W in [0, 1]
    frame_rate_hz: float = VIDEO_RATE_HZ


def _resonator(x, freq, bw, sr):
    c = -np.exp(-2 * np.pi * bw / sr)
    b = 2 * np.exp(-np.pi * bw / sr) * np.cos(2 * np.pi * freq / sr)
    a = 1 - b - c
    return lfilter([a], [1.0, -b, -c], x)


def _check_phones(phones):
    for sym, dur in phones:
        if sym not in PHONES:
            raise ValueError(f"unknown phone symbol {sym!r}")
        if dur <= 0 or dur % VIDEO_FRAME_MS:
            raise ValueError(f"phone {sym!r}: duration {dur} ms is not a positive multiple of 40 ms")


def articulation_trajectory(phones) -> np.ndarray:
    """One articulation row per 40 ms frame; the first frame of each phone is the
    midpoint of a linear ramp from the previous phone."""
    rows = []
    prev = None
    for sym, dur in phones:
        art = np.array(PHONES[sym].articulation, dtype=np.float64)
        for k in range(dur // VIDEO_FRAME_MS):
            rows.append(0.5 * (prev + art) if (k == 0 and prev is not None) else art)
        prev = art
    return np.array(rows)


def render_lip_frames(trajectory: np.ndarray, size: int = 24, supersample: int = 4) -> VisualSequence:
    """Draw an anti-aliased mouth per frame.

    Lips are a dim ring (intensity 0.3); the mouth opening is an ellipse whose
    half-height follows aperture, half-width follows width and brightness
    (0.6 + 0.4 * protrusion) follows protrusion.
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] != 3:
        raise ValueError("trajectory must be T x 3 (aperture, width, protrusion)")
    if np.any(traj < 0) or np.any(traj > 1) or not np.all(np.isfinite(traj)):
        raise ValueError("trajectory values must lie in [0, 1]")
    s = supersample
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    c = size / 2.0
    frames = np.empty((len(traj), size, size))

    def coverage(a, b):
        if a < 1e-6 or b < 1e-6:  # degenerate ellipse covers nothing
            return np.zeros((size, size))
        inside = ((xx - c) / a) ** 2 + ((yy - c) / b) ** 2 <= 1.0
        return inside.reshape(size, s, size, s).mean(axis=(1, 3))

    for t, (aperture, width, protrusion) in enumerate(traj):
        a = 2.0 + 8.0 * width
        b = 9.0 * aperture
        lips = coverage(a + 1.5, b + 2.0)
        mouth = coverage(a, b)
        frames[t] = 0.3 * lips + (0.3 + 0.4 * protrusion) * mouth
    return VisualSequence(frames)


def synth_utterance(phones, speaker: SpeakerSpec, seed=0, cfg: AudioConfig = AudioConfig(),
                    frame_size: int = 24):
    """Return ``(Waveform, VisualSequence, transcript)`` for ``phones = [(symbol, ms), ...]``."""
    _check_phones(phones)
    sr = cfg.sample_rate_hz
    rng = np.random.default_rng(seed)
    total_ms = sum(d for _, d in phones)
    n = total_ms * sr // 1000
    fade = sr // 200  # 5 ms each side of a boundary -> 10 ms cross-fade
    warm = sr // 50
    out = np.zeros(n)
    bounds = np.cumsum([0] + [d * sr // 1000 for _, d in phones])
    for i, (sym, _) in enumerate(phones):
        spec = PHONES[sym]
        start, end = bounds[i], bounds[i + 1]
        lo = start - fade if i > 0 else 0
        hi = end + fade if i < len(phones) - 1 else n
        src_lo = max(lo - warm, 0)
        idx = np.arange(src_lo, hi)
        if spec.voiced:
            period = sr / speaker.f0_hz
            src = (np.floor(idx / period) != np.floor((idx - 1) / period)).astype(np.float64)
            bws = (60.0, 90.0, 150.0)
        else:
            src = rng.standard_normal(len(idx))
            bws = (200.0, 300.0, 400.0)
        y = src
        for f, bw in zip(spec.formants_hz, bws):
            y = _resonator(y, min(f * speaker.formant_scale, 0.45 * sr), bw, sr)
        y = y[lo - src_lo:]
        core = y[start - lo:end - lo]
        rms = np.sqrt(np.mean(core ** 2)) + 1e-12
        y = y * (spec.level / rms)
        w = np.ones(hi - lo)
        if i > 0:
            w[: 2 * fade] = (np.arange(2 * fade) + 0.5) / (2 * fade)
        if i < len(phones) - 1:
            w[-2 * fade:] = np.minimum(w[-2 * fade:], 1.0 - (np.arange(2 * fade) + 0.5) / (2 * fade))
        out[lo:hi] += w * y
    out *= speaker.amplitude
    out *= 0.9 / (np.max(np.abs(out)) + 1e-12)
    video = render_lip_frames(articulation_trajectory(phones), size=frame_size)
    return Waveform(out, sr), video, [sym for sym, _ in phones]


def random_phones(rng: np.random.Generator, min_syllables=3, max_syllables=4):
    phones = []
    for _ in range(int(rng.integers(min_syllables, max_syllables + 1))):
        cons = CONSONANTS[rng.integers(len(CONSONANTS))]
        vowels = _VOWELS_AFTER.get(cons, VOWELS)
        vowel = vowels[rng.integers(len(vowels))]
        phones.append((cons, int(rng.choice([80, 120]))))
        phones.append((vowel, int(rng.choice([120, 160, 200]))))
    return phones


def homophene_twin(phones):
    """Swap every homophene phone for its partner; ``None`` if there is nothing to swap."""
    if not any(sym in HOMOPHENES for sym, _ in phones):
        return None
    return [(HOMOPHENES.get(sym, sym), d) for sym, d in phones]


def phone_labels(phones, rate_hz: float = 50.0) -> list:
    """Phone symbol for each frame at ``rate_hz`` (frames never straddle a phone)."""
    step_ms = 1000.0 / rate_hz
    labels = []
    for sym, dur in phones:
        labels.extend([sym] * int(round(dur / step_ms)))
    return labels


# ---------------------------------------------------------------- corpus

@dataclass
class CorpusConfig:
    n_speakers: int = 8
    utts_per_speaker: int = 50
    split: tuple = (0.8, 0.1, 0.1)
    unseen_speakers: int = 0
    homophene_pairs: int = 4
    min_syllables: int = 3
    max_syllables: int = 4
    frame_size: int = 24

    def violations(self) -> list[str]:
        errs = []
        sp = list(self.split)
        if len(sp) != 3 or any(f < 0 for f in sp) or abs(sum(sp) - 1.0) > 1e-6:
            errs.append(f"data.split must be three non-negative fractions summing to 1, got {sp}")
        if self.n_speakers < 1 or self.utts_per_speaker < 1:
            errs.append("data.n_speakers and data.utts_per_speaker must be >= 1")
        if not 0 <= self.unseen_speakers < self.n_speakers:
            errs.append("data.unseen_speakers must be in [0, n_speakers)")
        if 2 * self.homophene_pairs > self.n_speakers * self.utts_per_speaker:
            errs.append("data.homophene_pairs exceeds the utterance budget")
        if self.min_syllables < 1 or self.max_syllables < self.min_syllables:
            errs.append("data syllable range is invalid")
        return errs


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: int
    phone_sequence: list
    wav_path: str
    frames_path: str
    mel_path: str
    transcript: list
    split: str = "train"
    homophene_of: str | None = None


@dataclass
class Manifest:
    records: list
    root: Path = field(default_factory=Path)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name], self.root)

    def by_id(self, utt_id: str) -> UtteranceRecord:
        for r in self.records:
            if r.utt_id == utt_id:
                return r
        raise KeyError(utt_id)

    def wav(self, rec) -> Waveform:
        return read_wav(self.root / rec.wav_path)

    def frames(self, rec) -> np.ndarray:
        return load_frames(self.root / rec.frames_path)

    def mel(self, rec):
        return load_mel(self.root / rec.mel_path)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    d["phone_sequence"] = [tuple(p) for p in d["phone_sequence"]]
                    records.append(UtteranceRecord(**d))
        return cls(records, path.parent)


def _plan(cfg: CorpusConfig, seed: int):
    """Decide phones, speakers, homophene twins and splits without synthesizing audio."""
    rng = np.random.default_rng([seed, 1])
    n_total = cfg.n_speakers * cfg.utts_per_speaker
    twins_per_spk = np.zeros(cfg.n_speakers, dtype=int)
    for i in range(cfg.homophene_pairs):
        twins_per_spk[i % cfg.n_speakers] += 1
    groups = []  # each group is a list of (utt_id, speaker_id, phones, twin_of)
    for spk in range(cfg.n_speakers):
        n_twins = int(twins_per_spk[spk])
        n_base = cfg.utts_per_speaker - n_twins
        made_twins = 0
        for u in range(n_base):
            phones = random_phones(rng, cfg.min_syllables, cfg.max_syllables)
            uid = f"spk{spk:03d}_u{u:04d}"
            group = [(uid, spk, phones, None)]
            if made_twins < n_twins:
                twin = homophene_twin(phones)
                if twin is not None:
                    group.append((uid + "_h", spk, twin, uid))
                    made_twins += 1
            groups.append(group)
        # not enough homophene-bearing utterances: pad with plain ones
        for extra in range(n_twins - made_twins):
            uid = f"spk{spk:03d}_u{n_base + extra:04d}"
            groups.append([(uid, spk, random_phones(rng, cfg.min_syllables, cfg.max_syllables), None)])
    assert sum(len(g) for g in groups) == n_total

    split_of = {}
    order = rng.permutation(len(groups))
    if cfg.unseen_speakers:
        held = set(rng.permutation(cfg.n_speakers)[: cfg.unseen_speakers].tolist())
        test_groups = [groups[i] for i in order if groups[i][0][1] in held]
        seen = [groups[i] for i in order if groups[i][0][1] not in held]
        tv = cfg.split[0] + cfg.split[1]
        fracs = {"train": cfg.split[0] / tv if tv else 1.0, "val": cfg.split[1] / tv if tv else 0.0}
        for g in test_groups:
            for item in g:
                split_of[item[0]] = "test"
        _assign(seen, fracs, split_of)
    else:
        _assign([groups[i] for i in order], dict(zip(("train", "val", "test"), cfg.split)), split_of)
    return groups, split_of


def _assign(groups, fracs, split_of):
    n = sum(len(g) for g in groups)
    names = list(fracs)
    targets = {k: int(round(fracs[k] * n)) for k in names[1:]}
    targets[names[0]] = n - sum(targets.values())
    remaining = dict(targets)
    for g in sorted(groups, key=len, reverse=True):
        fits = [k for k in names if remaining[k] >= len(g)] or names
        best = max(fits, key=lambda k: (remaining[k] / max(targets[k], 1), -names.index(k)))
        remaining[best] -= len(g)
        for item in g:
            split_of[item[0]] = best


def _synth_job(args):
    uid, spk, phones, corpus_seed, index, root, audio_cfg, frame_size, speaker_seed = args
    speaker = make_speaker(spk, speaker_seed)
    wav, video, _ = synth_utterance(phones, speaker, np.random.SeedSequence([corpus_seed, 7, index]),
                                    audio_cfg, frame_size)
    root = Path(root)
    write_wav(root / "wav" / f"{uid}.wav", wav)
    save_frames(video.frames, root / "frames" / f"{uid}.vidf")
    decoded = read_wav(root / "wav" / f"{uid}.wav")
    save_mel(log_mel(decoded, audio_cfg), root / "mel" / f"{uid}.melf")
    return uid


def build_corpus(cfg: CorpusConfig, out_dir, seed: int = 0, audio_cfg: AudioConfig = AudioConfig(),
                 workers: int = 1) -> Manifest:
    errs = cfg.violations()
    if errs:
        raise ValueError("; ".join(errs))
    root = Path(out_dir)
    for sub in ("wav", "frames", "mel"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    groups, split_of = _plan(cfg, seed)
    items = [item for g in groups for item in g]
    jobs = [(uid, spk, phones, seed, i, str(root), audio_cfg, cfg.frame_size, seed)
            for i, (uid, spk, phones, _) in enumerate(items)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_synth_job, jobs))
    else:
        for job in jobs:
            _synth_job(job)
    records = [
        UtteranceRecord(uid, spk, [tuple(p) for p in phones], f"wav/{uid}.wav", f"frames/{uid}.vidf",
                        f"mel/{uid}.melf", [s for s, _ in phones], split_of[uid], twin_of)
        for uid, spk, phones, twin_of in items
    ]
    records.sort(key=lambda r: r.utt_id)
    manifest = Manifest(records, root)
    manifest.save(root / "manifest.jsonl")
    with open(root / "transcripts.txt", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.utt_id + " " + " ".join(r.transcript) + "\n")
    return manifest
