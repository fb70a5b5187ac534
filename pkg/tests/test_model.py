import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lipunit.model import (ConformerEncoder, L2SConfig, L2SModel, VideoAugmentConfig, augment_video, center_crop,
                           collate, cosine_lr, hflip, infer_l2s, interleave, load_l2s, loss_mel, loss_total,
                           loss_unit, random_erase, save_l2s, time_mask, train_l2s)
from lipunit.units import Codebook

import oracles

TINY = dict(conformer_layers=1, attention_heads=2, latent_dim=16, conv_kernel=3, frontend_channels=4,
            mel_head_channels=16, unit_head_hidden=16, spk_proj_dim=8, unit_vocab=16, dropout=0.0)


def frames(b, t, size=24, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).random((b, t, size, size)).astype(np.float32))


def test_frontend_shape_and_sensitivity():
    model = L2SModel(L2SConfig(seed=0)).eval()
    z = model.frontend(frames(2, 10))
    assert z.shape == (2, 10, 144)
    with torch.no_grad():
        a = model.frontend(torch.zeros(1, 3, 24, 24))
        b = model.frontend(torch.ones(1, 3, 24, 24))
        assert not torch.equal(a, b)
        assert torch.equal(model.frontend(frames(2, 10)), model.frontend(frames(2, 10)))


def test_frontend_rejects_bad_shapes():
    model = L2SModel(L2SConfig(**TINY))
    with pytest.raises(ValueError):
        model.frontend(torch.zeros(1, 3, 8, 8))
    with pytest.raises(ValueError):
        model.frontend(torch.zeros(3, 24, 24))


def test_interleave():
    x = torch.tensor([[[1.0], [2.0]]])
    assert interleave(x, 2)[0, :, 0].tolist() == [1.0, 1.0, 2.0, 2.0]
    assert torch.equal(interleave(x, 1), x)
    assert interleave(torch.zeros(1, 10, 3), 2).shape[1] == 20
    with pytest.raises(ValueError):
        interleave(x, 0)


def test_encoder_shape():
    enc = ConformerEncoder(144, 2, 4, 31, dropout=0.0).eval()
    assert enc(torch.randn(2, 20, 144)).shape == (2, 20, 144)


def test_encoder_input_gradient_matches_finite_differences():
    torch.manual_seed(0)
    enc = ConformerEncoder(8, 1, 2, 3, dropout=0.0).double().eval()
    x = torch.randn(1, 4, 8, dtype=torch.float64, requires_grad=True)
    # a plain sum is constant after the closing LayerNorm, so weight the outputs
    w = torch.randn(1, 4, 8, dtype=torch.float64)
    (enc(x) * w).sum().backward()
    analytic = x.grad.clone()
    numeric = torch.zeros_like(x)
    h = 1e-3
    with torch.no_grad():
        for idx in np.ndindex(*x.shape):
            xp, xm = x.clone(), x.clone()
            xp[idx] += h
            xm[idx] -= h
            numeric[idx] = ((enc(xp) * w).sum() - (enc(xm) * w).sum()) / (2 * h)
    rel = (analytic - numeric).norm() / numeric.norm()
    assert rel < 1e-3


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000))
def test_padding_does_not_leak(pad, seed):
    torch.manual_seed(seed)
    enc = ConformerEncoder(16, 2, 2, 5, dropout=0.0).eval()
    x = torch.randn(1, 7, 16)
    padded = torch.cat([x, 100 * torch.randn(1, pad, 16)], dim=1)
    mask = torch.zeros(1, 7 + pad, dtype=torch.bool)
    mask[:, :7] = True
    with torch.no_grad():
        ref = enc(x)
        out = enc(padded, mask)[:, :7]
    assert (ref - out).abs().max() < 1e-5


def test_model_padding_matches_single_item():
    model = L2SModel(L2SConfig(**TINY)).eval()
    z = torch.from_numpy(np.random.default_rng(0).standard_normal((2, 256)).astype(np.float32))
    fr = frames(2, 9, 20)
    with torch.no_grad():
        batch = model(fr, z, torch.tensor([9, 6]))
        alone = model(fr[1:, :6], z[1:])
    assert (batch.mel_stacked_pred[1, :12] - alone.mel_stacked_pred[0]).abs().max() < 1e-5
    assert (batch.unit_logits[1, :12] - alone.unit_logits[0]).abs().max() < 1e-5


def test_head_shapes_and_speaker_independence():
    model = L2SModel(L2SConfig(seed=1)).eval()
    z_v = torch.randn(2, 20, 144)
    z1, z2 = torch.randn(2, 256), torch.randn(2, 256)
    with torch.no_grad():
        a, b = model.predict_targets(z_v, z1), model.predict_targets(z_v, z2)
    assert a.mel_stacked_pred.shape == (2, 20, 160)
    assert a.unit_logits.shape == (2, 20, 64)
    assert torch.equal(a.unit_logits, b.unit_logits)
    assert not torch.equal(a.mel_stacked_pred, b.mel_stacked_pred)


def test_speaker_changes_trained_mel(trained_l2s, stage1_fixture):
    model, _ = trained_l2s
    it = stage1_fixture["items"][3]
    fr = torch.from_numpy(augment_video(it.frames, None, model.cfg.video_augment, train=False))[None]
    z_other = torch.from_numpy(stage1_fixture["items"][-1].z_spk)[None]
    with torch.no_grad():
        a = model(fr, torch.from_numpy(it.z_spk)[None])
        b = model(fr, z_other)
    assert (a.mel_stacked_pred - b.mel_stacked_pred).abs().mean() > 0


def test_loss_mel_values():
    t = torch.randn(2, 5, 160)
    assert loss_mel(t, t).item() == 0.0
    assert loss_mel(t + 0.5, t).item() == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ValueError):
        loss_mel(t, t[:, :4])


@pytest.mark.parametrize("seed", range(5))
def test_loss_mel_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.standard_normal((3, 7, 12)), rng.standard_normal((3, 7, 12))
    lengths = [7, 4, 1]
    mask = torch.arange(7)[None] < torch.tensor(lengths)[:, None]
    got = loss_mel(torch.from_numpy(pred), torch.from_numpy(target), mask).item()
    assert got == pytest.approx(oracles.l1_masked(pred, target, lengths), abs=1e-7)


def test_loss_unit_values():
    assert loss_unit(torch.zeros(1, 4, 200), torch.zeros(1, 4, dtype=torch.long)).item() == \
        pytest.approx(math.log(200), abs=1e-6)
    logits = torch.zeros(1, 3, 64, dtype=torch.float64)
    labels = torch.tensor([[1, 5, 63]])
    logits[0, [0, 1, 2], labels[0]] = 30.0
    assert loss_unit(logits, labels).item() < 1e-9
    with pytest.raises(ValueError):
        loss_unit(torch.zeros(1, 2, 4), torch.tensor([[0, 4]]))


@pytest.mark.parametrize("seed", range(5))
def test_loss_unit_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2, 6, 20)) * 3
    labels = rng.integers(0, 20, (2, 6))
    lengths = [6, 3]
    mask = torch.arange(6)[None] < torch.tensor(lengths)[:, None]
    got = loss_unit(torch.from_numpy(logits), torch.from_numpy(labels), mask).item()
    assert got == pytest.approx(oracles.nll_masked(logits, labels, lengths), abs=1e-6)


def test_loss_total():
    assert loss_total(0.5, 2.0, 10, 1) == pytest.approx(7.0)
    assert loss_total(0.5, 2.0, 10, 0) == pytest.approx(5.0)
    assert loss_total(0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        loss_total(1.0, 1.0, -1, 1)


def test_eval_augmentation_is_center_crop():
    x = np.random.default_rng(0).random((5, 24, 24)).astype(np.float32)
    out = augment_video(x, np.random.default_rng(1), VideoAugmentConfig(), train=False)
    assert np.array_equal(out, x[:, 2:22, 2:22])
    assert np.array_equal(hflip(hflip(center_crop(x, 20))), center_crop(x, 20))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_random_erase_zeroes_only_the_rectangle(seed):
    x = np.random.default_rng(seed).random((4, 20, 20)) + 0.1
    out, (top, left, h, w) = random_erase(x, np.random.default_rng(seed), 0.25)
    inside = np.zeros_like(x, dtype=bool)
    inside[:, top:top + h, left:left + w] = True
    assert np.all(out[inside] == 0)
    assert np.array_equal(out[~inside], x[~inside])
    assert h * w <= 0.25 * 400


def test_time_mask_bounds():
    x = np.ones((30, 4, 4))
    out, (start, length) = time_mask(x, np.random.default_rng(0), 0.1)
    assert 1 <= length <= 3
    assert np.all(out[start:start + length] == 0) and out.sum() == (30 - length) * 16


def test_cosine_lr():
    assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0)


def test_infer_lengths_and_codebook_check():
    model = L2SModel(L2SConfig(**TINY))
    x = np.random.default_rng(0).random((10, 24, 24)).astype(np.float32)
    mel, units = infer_l2s(model, x, np.zeros(256, dtype=np.float32))
    assert mel.frames.shape == (40, 80) and mel.frame_rate_hz == 100.0
    assert len(units) == 20 and units.codes.max() < 16
    with pytest.raises(ValueError):
        infer_l2s(model, x, np.zeros(256, dtype=np.float32), Codebook(np.zeros((64, 54))))


def test_smoke_training_reduces_loss(stage1_fixture, tmp_path):
    cfg = L2SConfig(**{**TINY, "unit_vocab": 64, "dropout": 0.1}, seed=3, batch_size=4, lr=3e-3)
    model, history = train_l2s(stage1_fixture["items"], cfg, steps=40, log_path=tmp_path / "log.jsonl")
    first = np.median([h["l_total"] for h in history[:10]])
    last = np.median([h["l_total"] for h in history[-10:]])
    assert last < first
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 40


def test_training_is_seeded(stage1_fixture):
    cfg = L2SConfig(**{**TINY, "unit_vocab": 64}, seed=5, batch_size=4)
    _, h1 = train_l2s(stage1_fixture["items"], cfg, steps=5)
    _, h2 = train_l2s(stage1_fixture["items"], cfg, steps=5)
    assert h1 == h2


def test_checkpoint_roundtrip(tmp_path):
    model = L2SModel(L2SConfig(**TINY, seed=2)).eval()
    model.codebook_hash = "abc"
    save_l2s(model, tmp_path / "m.pt", {"note": 1})
    back = load_l2s(tmp_path / "m.pt")
    assert back.cfg == model.cfg and back.codebook_hash == "abc"
    x, z = frames(1, 5, 20), torch.zeros(1, 256)
    with torch.no_grad():
        assert torch.equal(model(x, z).unit_logits, back(x, z).unit_logits)


def test_collate_pads_and_masks(stage1_fixture):
    items = stage1_fixture["items"][:3]
    fr, z, lengths, mel, units = collate(items)
    assert fr.shape[0] == 3 and fr.shape[2:] == (20, 20)
    assert lengths.tolist() == [it.frames.shape[0] for it in items]
    assert mel.shape[1] == units.shape[1] == 2 * int(lengths.max())
