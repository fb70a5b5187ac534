"""Command implementations behind the CLI.

Artifacts live under ``output_dir/{corpus,codebooks,checkpoints,reports}``;
``run_manifest.json`` records a content hash for every produced file.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch

from .config import PipelineConfig
from .evaluate import UnitPhoneDecoder, corrupted_vocoder_stoi, evaluate
from .formats import read_units, write_units, write_wav
from .metrics import MetricsReport, format_table, table_csv
from .model import L2SConfig, infer_l2s, load_l2s, make_items, save_l2s, train_l2s
from .synth import Manifest, build_corpus, speaker_embedding
from .units import codebook_load, codebook_save, extract_features, kmeans_fit, quantize
from .vocoder import (VocoderConfig, load_vocoder, load_vocoder_state, make_vocoder_items, save_vocoder,
                      train_vocoder, vocode)

log = logging.getLogger("lipunit")

ABLATION_ROWS = ("Baseline", "+ Speech units", "+ Multi-input vocoder", "+ Augmented mel")


class MissingArtifact(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Paths and bookkeeping for one output directory."""

    def __init__(self, cfg: PipelineConfig, root=None, workers: int = 1, resume: bool = False):
        self.cfg = cfg
        self.root = Path(root or cfg.output_dir)
        self.workers = workers
        self.resume = resume
        torch.manual_seed(cfg.seed)
        torch.use_deterministic_algorithms(True)

    # layout
    @property
    def corpus(self):
        return self.root / "corpus"

    @property
    def manifest_path(self):
        return self.corpus / "manifest.jsonl"

    @property
    def units_path(self):
        return self.corpus / "units.txt"

    @property
    def codebook_path(self):
        return Path(self.cfg.units.codebook) if self.cfg.units.codebook else self.root / "codebooks" / "codebook.uncb"

    def checkpoint(self, name):
        return self.root / "checkpoints" / name

    def report(self, name):
        return self.root / "reports" / name

    def require(self, *paths):
        for p in paths:
            if not Path(p).exists():
                raise MissingArtifact(f"missing upstream artifact: {p}")

    def record(self, *paths):
        """Add content hashes of ``paths`` to the run manifest."""
        mpath = self.root / "run_manifest.json"
        entries = json.loads(mpath.read_text()) if mpath.exists() else {}
        for p in paths:
            p = Path(p)
            entries[str(p.relative_to(self.root)) if p.is_relative_to(self.root) else str(p)] = sha256_file(p)
        self.root.mkdir(parents=True, exist_ok=True)
        mpath.write_text(json.dumps(dict(sorted(entries.items())), indent=1) + "\n")

    def done(self, *paths) -> bool:
        return self.resume and all(Path(p).exists() for p in paths)

    # loaders
    def manifest(self) -> Manifest:
        self.require(self.manifest_path)
        return Manifest.load(self.manifest_path)

    def units(self) -> dict:
        self.require(self.units_path)
        return read_units(self.units_path)

    def codebook(self):
        self.require(self.codebook_path)
        return codebook_load(self.codebook_path, self.cfg.units.extractor)


def _embed(speaker_id):
    return speaker_embedding(speaker_id).vector.astype(np.float32)


# ---------------------------------------------------------------- commands

def make_data(run: Run):
    if run.done(run.manifest_path):
        log.info("corpus already present, skipping")
        return
    build_corpus(run.cfg.data, run.corpus, run.cfg.seed, run.cfg.audio, run.workers)
    run.record(run.manifest_path, run.corpus / "transcripts.txt")


def fit_units(run: Run):
    if run.done(run.units_path, run.codebook_path):
        return
    manifest = run.manifest()
    ucfg = run.cfg.units
    feats = {r.utt_id: extract_features(manifest.wav(r), run.cfg.audio, ucfg.extractor) for r in manifest}
    if ucfg.codebook:
        cb = run.codebook()
    else:
        train = [feats[r.utt_id] for r in manifest.split("train")]
        cb = kmeans_fit(train, ucfg.k, ucfg.seed, ucfg.max_iters, ucfg.tol, ucfg.extractor)
        run.codebook_path.parent.mkdir(parents=True, exist_ok=True)
        codebook_save(cb, run.codebook_path)
    write_units(run.units_path, {uid: quantize(f, cb).codes for uid, f in feats.items()})
    run.record(run.units_path, run.codebook_path)


def _l2s_items(run, manifest, units, split):
    return make_items(manifest, units, _embed, manifest.split(split).records, run.cfg.units.stack_factor,
                      run.cfg.l2s.interleave_ratio)


def _voc_items(run, manifest, units, split):
    return make_vocoder_items(manifest, units, _embed, manifest.split(split).records, run.cfg.audio.hop_samples)


def train_l2s_command(run: Run, cfg: L2SConfig | None = None, name: str = "l2s.pt"):
    cfg = cfg or run.cfg.l2s
    out = run.checkpoint(name)
    if run.done(out):
        return load_l2s(out)
    manifest, units, cb = run.manifest(), run.units(), run.codebook()
    items = _l2s_items(run, manifest, units, "train")
    out.parent.mkdir(parents=True, exist_ok=True)
    run.report("").mkdir(parents=True, exist_ok=True)
    log_path = run.report(name.replace(".pt", "_train.jsonl"))
    model, _ = train_l2s(items, cfg, log_path=log_path, codebook_hash=cb.digest())
    save_l2s(model, out, {"steps": cfg.steps, "train_utterances": len(items)})
    run.record(out, log_path)
    return model


def train_vocoder_command(run: Run, cfg: VocoderConfig | None = None, name: str = "vocoder.pt"):
    cfg = cfg or run.cfg.vocoder
    out = run.checkpoint(name)
    resume_state = None
    if out.exists() and run.resume:
        resume_state = load_vocoder_state(out)
        if resume_state["step"] >= cfg.steps:
            return load_vocoder(out)
    manifest, units = run.manifest(), run.units()
    items = _voc_items(run, manifest, units, "train")
    model, history, state = train_vocoder(items, cfg, audio_cfg=run.cfg.audio, resume=resume_state)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_vocoder(state, out, {"train_utterances": len(items)})
    run.report("").mkdir(parents=True, exist_ok=True)
    log_path = run.report(name.replace(".pt", "_train.jsonl"))
    with open(log_path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
    run.record(out, log_path)
    return model


def synthesize(run: Run, frames_path, speaker_id: int, out_path):
    from .formats import load_frames
    l2s_path, voc_path = run.checkpoint("l2s.pt"), run.checkpoint("vocoder.pt")
    run.require(l2s_path, voc_path, frames_path)
    l2s, voc = load_l2s(l2s_path), load_vocoder(voc_path)
    z = _embed(speaker_id)
    mel, units = infer_l2s(l2s, load_frames(frames_path), z)
    wav = vocode(voc, mel, units.codes, z, run.cfg.audio.sample_rate_hz)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_wav(out_path, wav)
    return wav


def _decoder(manifest, units):
    return UnitPhoneDecoder.fit(manifest.split("train").records, units)


def evaluate_command(run: Run):
    l2s_path, voc_path = run.checkpoint("l2s.pt"), run.checkpoint("vocoder.pt")
    run.require(l2s_path, voc_path)
    out = run.report("metrics.json")
    if run.done(out):
        return MetricsReport.load(out)
    manifest, units, cb = run.manifest(), run.units(), run.codebook()
    l2s, voc = load_l2s(l2s_path), load_vocoder(voc_path)
    if l2s.cfg.unit_vocab != cb.K:
        raise ValueError(f"checkpoint predicts {l2s.cfg.unit_vocab} units, codebook has {cb.K}")
    decoder = _decoder(manifest, units)
    split = run.cfg.metrics.split
    report = evaluate(l2s, voc, manifest, split, units, cb, decoder, run.cfg.audio, "pipeline",
                      {"split": split})
    upper = evaluate(None, voc, manifest, split, units, cb, decoder, run.cfg.audio, "ground-truth features",
                     {"split": split})
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    upper.save(run.report("metrics_passthrough.json"))
    rows = [("Pipeline", report.mean), ("Ground-truth features", upper.mean)]
    run.report("metrics.txt").write_text(format_table(rows) + "\n")
    run.report("metrics.csv").write_text(table_csv(rows))
    run.record(out, run.report("metrics_passthrough.json"), run.report("metrics.txt"))
    return report


def ablate(run: Run) -> dict:
    """Train the unit-loss and vocoder variants and compare them on the evaluation split."""
    cfg = run.cfg
    out = run.report("ablation.json")
    if run.done(out):
        return json.loads(out.read_text())
    make_data(run)
    fit_units(run)
    manifest, units, cb = run.manifest(), run.units(), run.codebook()
    decoder = _decoder(manifest, units)
    split = cfg.metrics.split
    lam = cfg.metrics.ablation_lambda_unit

    from dataclasses import replace
    n_seeds = cfg.metrics.ablation_seeds
    weights = {"lambda0": 0.0, "units": lam}
    l2s_seeded = {key: [] for key in weights}
    for i in range(n_seeds):
        suffix = f"_s{i}" if i else ""
        for key, weight in weights.items():
            l2s_cfg = replace(cfg.l2s, lambda_unit=weight, seed=cfg.l2s.seed + i)
            l2s_seeded[key].append(train_l2s_command(run, l2s_cfg, f"l2s_{key}{suffix}.pt"))
    l2s_base, l2s_units = l2s_seeded["lambda0"][0], l2s_seeded["units"][0]
    vocs, seeded = {}, {}
    for use_units in (False, True):
        for aug in (False, True):
            key = f"{'multi' if use_units else 'melonly'}_{'aug' if aug else 'noaug'}"
            seeded[key] = []
            for i in range(n_seeds):
                # mel-only means no side inputs at all; multi-input adds units and the speaker vector
                vcfg = replace(cfg.vocoder, use_units=use_units, use_speaker=use_units and cfg.vocoder.use_speaker,
                               augment=aug, seed=cfg.vocoder.seed + i)
                suffix = f"_s{i}" if i else ""
                seeded[key].append(train_vocoder_command(run, vcfg, f"vocoder_{key}{suffix}.pt"))
            vocs[(use_units, aug)] = seeded[key][0]

    combos = {
        "Baseline": (l2s_base, vocs[(False, False)]),
        "+ Speech units": (l2s_units, vocs[(False, False)]),
        "+ Multi-input vocoder": (l2s_units, vocs[(True, False)]),
        "+ Augmented mel": (l2s_units, vocs[(True, True)]),
    }
    reports = {}
    for name, (l2s, voc) in combos.items():
        reports[name] = evaluate(l2s, voc, manifest, split, units, cb, decoder, cfg.audio, name,
                                 {"split": split, "lambda_unit": l2s.cfg.lambda_unit,
                                  "vocoder_units": voc.cfg.use_units, "vocoder_augment": voc.cfg.augment})
    passthrough = evaluate(None, vocs[(True, False)], manifest, split, units, cb, decoder, cfg.audio,
                           "Ground-truth features", {"split": split})

    vitems = _voc_items(run, manifest, units, split)
    blur_s, noise_s = cfg.metrics.corrupt_blur_sigma, cfg.metrics.corrupt_noise_sigma
    corrupted = {}
    for key, models in sorted(seeded.items()):
        clean = [corrupted_vocoder_stoi(v, vitems, 0.0, 0.0, cfg.seed) for v in models]
        dirty = [corrupted_vocoder_stoi(v, vitems, blur_s, noise_s, cfg.seed) for v in models]
        corrupted[key] = {
            "clean_stoi": float(np.mean(clean)),
            "corrupted_stoi": float(np.mean(dirty)),
            "degradation": float(np.mean(clean) - np.mean(dirty)),
            "per_seed": [{"seed": cfg.vocoder.seed + i, "clean_stoi": c, "corrupted_stoi": d}
                         for i, (c, d) in enumerate(zip(clean, dirty))],
        }

    # stage-1 comparison with the baseline vocoder, one entry per seed (the first is the table row)
    uer_by_seed = {"lambda0": [reports["Baseline"].mean["uer"]], "units": [reports["+ Speech units"].mean["uer"]]}
    for i in range(1, n_seeds):
        for key in weights:
            r = evaluate(l2s_seeded[key][i], vocs[(False, False)], manifest, split, units, cb, decoder, cfg.audio)
            uer_by_seed[key].append(r.mean["uer"])
    stage1 = {key: {"uer": float(np.mean(v)), "per_seed": v} for key, v in uer_by_seed.items()}

    checks = {
        "units_lower_uer": stage1["units"]["uer"] < stage1["lambda0"]["uer"],
        "multi_input_higher_corrupted_stoi":
            corrupted["multi_noaug"]["corrupted_stoi"] > corrupted["melonly_noaug"]["corrupted_stoi"],
        "augmentation_degrades_less": corrupted["multi_aug"]["degradation"] < corrupted["multi_noaug"]["degradation"],
    }
    result = {
        "schema_version": 1,
        "split": split,
        "corruption": {"blur_sigma": blur_s, "noise_sigma": noise_s},
        "seeds": n_seeds,
        "rows": {name: json.loads(r.to_json()) for name, r in reports.items()},
        "passthrough": json.loads(passthrough.to_json()),
        "stage1_uer": stage1,
        "corrupted_vocoder": corrupted,
        "checks": checks,
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    # insertion order is deterministic and keeps the rows in table order
    out.write_text(json.dumps(result, indent=1) + "\n")
    for name, r in reports.items():
        r.save(run.report(f"ablation_{name.strip('+ ').replace(' ', '_').replace('-', '_').lower()}.json"))
    rows = [(n, reports[n].mean) for n in ABLATION_ROWS] + [("(GT features, multi-input)", passthrough.mean)]
    table = format_table(rows)
    table += f"\n\nStage-1 UER with the mel-only vocoder, mean of {n_seeds} seed(s): " \
             f"unit loss 0 {stage1['lambda0']['uer']:.4f}, unit loss {lam} {stage1['units']['uer']:.4f}"
    table += "\n\nVocoder STOI on ground-truth features, clean vs corrupted " \
             f"(blur sigma {blur_s}, noise sigma {noise_s}, mean of {n_seeds} seed(s)):\n"
    for key, v in corrupted.items():
        table += f"  {key:<16} clean {v['clean_stoi']:.3f}  corrupted {v['corrupted_stoi']:.3f}  " \
                 f"drop {v['degradation']:.3f}\n"
    table += "\nDirectional checks:\n" + "".join(f"  {k}: {'yes' if v else 'no'}\n" for k, v in checks.items())
    run.report("ablation.txt").write_text(table)
    run.report("ablation.csv").write_text(table_csv(rows))
    run.record(out, run.report("ablation.txt"))
    log.info("ablation report written to %s", out)
    return result

