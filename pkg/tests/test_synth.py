import hashlib
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipunit.synth import (CONSONANTS, HOMOPHENES, PHONES, CorpusConfig, Manifest, SpeakerSpec, build_corpus,
                           homophene_twin, make_speaker, phone_labels, random_phones, render_lip_frames,
                           speaker_embedding, synth_utterance, _VOWELS_AFTER)
from lipunit.units import extract_features, kmeans_fit, quantize

import oracles


def test_durations():
    wav, video, transcript = synth_utterance([("aa", 400)], make_speaker(0), 0)
    assert len(wav.samples) == 6400
    assert video.frames.shape == (10, 24, 24)
    assert transcript == ["aa"]
    assert np.max(np.abs(wav.samples)) == pytest.approx(0.9)


def test_rejects_off_grid_duration_and_unknown_phone():
    with pytest.raises(ValueError):
        synth_utterance([("aa", 50)], make_speaker(0))
    with pytest.raises(ValueError):
        synth_utterance([("zz", 40)], make_speaker(0))


@pytest.mark.parametrize("a,b", [("p", "b"), ("f", "v")])
def test_homophenes_share_video_not_audio(a, b):
    spk = make_speaker(1)
    wa, va, _ = synth_utterance([(a, 120), ("aa", 200)], spk, 5)
    wb, vb, _ = synth_utterance([(b, 120), ("aa", 200)], spk, 5)
    assert np.array_equal(va.frames, vb.frames)
    assert not np.array_equal(wa.samples, wb.samples)
    assert PHONES[a].articulation == PHONES[b].articulation


def test_pitch_follows_f0():
    phones = [("aa", 400)]
    for f0 in (100.0, 200.0):
        wav, _, _ = synth_utterance(phones, SpeakerSpec(0, f0, 1.0), 0)
        est = oracles.autocorr_pitch(wav.samples[1600:4800], 16000)
        assert abs(est - f0) / f0 < 0.05


def lit(frame):
    return int((frame > 0.5).sum())


def test_lip_rendering_aperture():
    frames = render_lip_frames(np.array([[0.0, 0.5, 0.5], [0.3, 0.5, 0.5], [0.9, 0.5, 0.5]])).frames
    counts = [lit(f) for f in frames]
    assert counts[0] == 0
    assert counts[2] > counts[1] > 0
    assert frames.min() >= 0 and frames.max() <= 1


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0.05, 0.5))
def test_lit_area_monotone_in_aperture(ap, width, prot, step):
    hi = min(ap + step, 1.0)
    frames = render_lip_frames(np.array([[ap, width, prot], [hi, width, prot]])).frames
    assert lit(frames[1]) >= lit(frames[0])


def test_rendering_deterministic_and_validated():
    traj = np.random.default_rng(0).random((7, 3))
    assert np.array_equal(render_lip_frames(traj).frames, render_lip_frames(traj).frames)
    with pytest.raises(ValueError):
        render_lip_frames(np.array([[1.5, 0.0, 0.0]]))


def test_phonotactics_of_random_phones():
    rng = np.random.default_rng(0)
    for _ in range(200):
        phones = random_phones(rng)
        assert 6 <= len(phones) <= 8
        for (c, _), (v, _) in zip(phones[::2], phones[1::2]):
            assert c in CONSONANTS
            assert v in _VOWELS_AFTER.get(c, (v,))


def test_homophene_twin():
    assert homophene_twin([("m", 80), ("aa", 120)]) is None
    twin = homophene_twin([("p", 80), ("ii", 120), ("v", 80)])
    assert twin == [("b", 80), ("ii", 120), ("f", 80)]
    assert all(HOMOPHENES[HOMOPHENES[k]] == k for k in HOMOPHENES)


def test_phone_labels_at_unit_rate():
    labels = phone_labels([("s", 80), ("aa", 120)], 50.0)
    assert labels == ["s"] * 4 + ["aa"] * 6


def test_speaker_embeddings():
    a, b = speaker_embedding(3), speaker_embedding(3)
    assert np.array_equal(a.vector, b.vector)
    vecs = np.stack([speaker_embedding(i).vector for i in range(32)])
    np.testing.assert_allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-6)
    cos = max(abs(float(vecs[i] @ vecs[j])) for i, j in itertools.combinations(range(32), 2))
    assert cos < 0.25  # measured 0.211


def test_corpus_split_counts(tmp_path):
    m = build_corpus(CorpusConfig(n_speakers=8, utts_per_speaker=50), tmp_path, seed=0)
    assert len(m) == 400
    assert [len(m.split(s)) for s in ("train", "val", "test")] == [320, 40, 40]


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_corpus_deterministic_and_worker_independent(tmp_path):
    cfg = CorpusConfig(n_speakers=3, utts_per_speaker=5, homophene_pairs=2)
    build_corpus(cfg, tmp_path / "a", seed=7)
    build_corpus(cfg, tmp_path / "b", seed=7)
    build_corpus(cfg, tmp_path / "c", seed=7, workers=2)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b") == _digest(tmp_path / "c")
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "c" / "manifest.jsonl").read_bytes()


def test_unseen_speakers_only_in_test(tmp_path):
    m = build_corpus(CorpusConfig(n_speakers=6, utts_per_speaker=6, unseen_speakers=2, homophene_pairs=3),
                     tmp_path, seed=1)
    train = {r.speaker_id for r in m.split("train")}
    test = {r.speaker_id for r in m.split("test")}
    assert len(test) == 2 and not train & test
    for r in m:
        if r.homophene_of:
            assert m.by_id(r.homophene_of).split == r.split


def test_homophene_pairs_share_video_and_differ_in_units(tmp_path):
    m = build_corpus(CorpusConfig(n_speakers=2, utts_per_speaker=12, homophene_pairs=4), tmp_path, seed=2)
    feats = {r.utt_id: extract_features(m.wav(r)) for r in m}
    cb = kmeans_fit(list(feats.values()), 32, seed=0)
    pairs = [(m.by_id(r.homophene_of), r) for r in m if r.homophene_of]
    assert len(pairs) == 4
    for a, b in pairs:
        assert np.array_equal(m.frames(a), m.frames(b))
        assert not np.array_equal(quantize(feats[a.utt_id], cb).codes, quantize(feats[b.utt_id], cb).codes)


def test_manifest_roundtrip(tmp_path):
    m = build_corpus(CorpusConfig(n_speakers=1, utts_per_speaker=3, homophene_pairs=0, split=(1, 0, 0)),
                     tmp_path, seed=0)
    back = Manifest.load(tmp_path / "manifest.jsonl")
    assert back.records == m.records
    rec = back.records[0]
    assert back.frames(rec).shape[0] * 4 == back.mel(rec).frames.shape[0]


def test_corpus_config_violations():
    assert CorpusConfig(split=(0.5, 0.5, 0.5)).violations()
    assert CorpusConfig(unseen_speakers=8).violations()
    assert not CorpusConfig().violations()
