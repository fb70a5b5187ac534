"""End-to-end evaluation of the two-stage pipeline on a manifest split."""

from __future__ import annotations

from collections import Counter

import numpy as np

from .audio import AudioConfig, MelSpectrogram
from .metrics import MetricsReport, error_rate, estoi, stoi
from .model import infer_l2s
from .synth import phone_labels, speaker_embedding
from .units import extract_features, quantize
from .vocoder import augment_mel, MelAugmentConfig, vocode


class UnitPhoneDecoder:
    """Maps each unit code to the phone it most often co-occurs with in training data."""

    def __init__(self, table: dict, default: str):
        self.table = table
        self.default = default

    @classmethod
    def fit(cls, records, units: dict, rate_hz: float = 50.0) -> "UnitPhoneDecoder":
        counts: dict[int, Counter] = {}
        overall = Counter()
        for rec in records:
            labels = phone_labels(rec.phone_sequence, rate_hz)
            for code, lab in zip(units[rec.utt_id], labels):
                counts.setdefault(int(code), Counter())[lab] += 1
                overall[lab] += 1
        if not overall:
            raise ValueError("no training frames to fit the unit-to-phone decoder")

        def majority(c: Counter) -> str:
            best = max(c.values())
            return min(p for p, n in c.items() if n == best)

        return cls({code: majority(c) for code, c in sorted(counts.items())}, majority(overall))

    def decode(self, codes) -> list:
        tokens = []
        for code in codes:
            phone = self.table.get(int(code), self.default)
            if not tokens or tokens[-1] != phone:
                tokens.append(phone)
        return tokens


def recognize_units(waveform, codebook, audio_cfg: AudioConfig = AudioConfig()):
    """Re-extract units from audio: the content recognizer applied to synthesized speech."""
    return quantize(extract_features(waveform, audio_cfg, codebook.extractor_id), codebook).codes


def _embed(speaker_id):
    return speaker_embedding(speaker_id).vector.astype(np.float32)


def evaluate(l2s_model, vocoder_model, manifest, split: str, units: dict, codebook,
             decoder: UnitPhoneDecoder, audio_cfg: AudioConfig = AudioConfig(), label: str = "",
             config: dict | None = None) -> MetricsReport:
    """Video -> (mel, units) -> waveform for each utterance of ``split``.

    With ``l2s_model=None`` the vocoder is fed ground-truth mel and units
    (the passthrough upper bound).
    """
    records = manifest.split(split).records
    if not records:
        raise ValueError(f"split {split!r} is empty")
    use_head = l2s_model is not None and l2s_model.cfg.lambda_unit > 0
    rows = []
    for rec in records:
        clean = manifest.wav(rec)
        gt_units = np.asarray(units[rec.utt_id])
        z = _embed(rec.speaker_id)
        if l2s_model is None:
            mel, pred_units = manifest.mel(rec), gt_units
        else:
            mel, seq = infer_l2s(l2s_model, manifest.frames(rec), z, codebook)
            pred_units = seq.codes
        wav = vocode(vocoder_model, mel, pred_units, z, audio_cfg.sample_rate_hz)
        heard = recognize_units(wav, codebook, audio_cfg)
        rows.append({
            "utt_id": rec.utt_id,
            "speaker_id": rec.speaker_id,
            "stoi": stoi(clean, wav),
            "estoi": estoi(clean, wav),
            "uer": error_rate(gt_units, heard),
            "wer": error_rate(rec.transcript, decoder.decode(heard)),
            "head_uer": error_rate(gt_units, pred_units) if use_head else None,
            "n_units": int(len(gt_units)),
        })
    return MetricsReport.from_rows(rows, config, label)


def corrupted_vocoder_stoi(vocoder_model, items, blur_sigma: float, noise_sigma: float, seed: int = 0,
                           kernel: int = 9) -> float:
    """Mean STOI of vocoding ground-truth features after a fixed blur + noise corruption."""
    scores = []
    cfg = MelAugmentConfig(blur_kernel=kernel)
    for i, it in enumerate(items):
        rng = np.random.default_rng([seed, i])
        mel = MelSpectrogram(it.mel)
        if blur_sigma > 0 or noise_sigma > 0:
            mel = augment_mel(mel, rng, cfg, blur_sigma=max(blur_sigma, 1e-3), noise_sigma=noise_sigma)
        wav = vocode(vocoder_model, mel, it.units, it.z_spk)
        scores.append(stoi(it.audio, wav.samples))
    return float(np.mean(scores))
