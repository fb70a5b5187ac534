import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lipunit.audio import (AudioConfig, MelSpectrogram, StackedMel, Waveform, griffin_lim, log_mel,
                           mel_center_frequencies, mel_filterbank, stack_mel, unstack_mel)
from lipunit.metrics import stoi
from lipunit.synth import make_speaker, synth_utterance

import oracles

SR = 16000


def sine(freq, seconds=1.0, amp=1.0):
    t = np.arange(int(SR * seconds)) / SR
    return amp * np.sin(2 * np.pi * freq * t)


def test_one_second_gives_100_frames():
    mel = log_mel(Waveform(np.random.default_rng(0).standard_normal(16000)))
    assert mel.frames.shape == (100, 80)
    assert mel.frame_rate_hz == 100.0


@pytest.mark.parametrize("n", [160, 161, 319, 320, 12345])
def test_frame_count_is_floor_of_hops(n):
    assert log_mel(Waveform(np.ones(n) * 0.1)).frames.shape[0] == n // 160


def test_silence_hits_floor():
    mel = log_mel(Waveform(np.zeros(16000)))
    assert np.all(mel.frames == np.log(1e-5))
    assert math.isclose(mel.frames[0, 0], -11.5129, abs_tol=1e-4)


def test_filter_centres_match_independent_mel_oracle():
    np.testing.assert_allclose(mel_center_frequencies(AudioConfig()), oracles.mel_centers(), rtol=1e-10)


def test_sine_peaks_in_bracketing_filter():
    centres = oracles.mel_centers()
    expected = int(np.argmin([abs(c - 440.0) for c in centres]))
    mel = log_mel(Waveform(sine(440.0)))
    assert int(np.argmax(mel.frames.mean(axis=0))) == expected == 15


def test_filterbank_unit_area():
    cfg = AudioConfig()
    fb = mel_filterbank(cfg)
    df = cfg.sample_rate_hz / cfg.n_fft
    # interior filters are wide enough for the discrete sum to approximate the unit integral
    np.testing.assert_allclose(fb[20:].sum(axis=1) * df, 1.0, rtol=0.05)
    assert np.all(fb >= 0)


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        log_mel(Waveform(np.zeros(0)))
    with pytest.raises(ValueError):
        log_mel(Waveform(np.zeros(16000), 8000))


def test_stack_shapes_and_truncation():
    m = MelSpectrogram(np.random.default_rng(1).standard_normal((100, 80)))
    s = stack_mel(m, 2)
    assert s.frames.shape == (50, 160)
    assert s.frame_rate_hz == 50.0
    odd = stack_mel(MelSpectrogram(np.random.default_rng(1).standard_normal((101, 80))), 2)
    assert odd.frames.shape == (50, 160)
    assert np.array_equal(unstack_mel(odd).frames, np.random.default_rng(1).standard_normal((101, 80))[:100])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20).map(lambda t: 2 * t), st.integers(1, 12)),
              elements=st.floats(-20, 20, allow_nan=False)))
def test_stack_unstack_roundtrip_exact(frames):
    m = MelSpectrogram(frames)
    assert np.array_equal(unstack_mel(stack_mel(m, 2)).frames, frames)


def test_stack_layout_concatenates_consecutive_frames():
    frames = np.arange(4 * 3, dtype=np.float64).reshape(4, 3)
    s = stack_mel(MelSpectrogram(frames), 2)
    assert np.array_equal(s.frames[0], np.concatenate([frames[0], frames[1]]))
    assert isinstance(s, StackedMel)


def test_griffin_lim_silence_and_zero_iterations():
    silent = log_mel(Waveform(np.zeros(8000)))
    y = griffin_lim(silent, iterations=10)
    assert len(y.samples) == 8000
    assert np.sqrt(np.mean(y.samples ** 2)) < 1e-3
    mel = log_mel(Waveform(sine(440.0, 0.5)))
    a, b = griffin_lim(mel, iterations=0), griffin_lim(mel, iterations=0)
    assert len(a.samples) == 8000 and np.array_equal(a.samples, b.samples)


def test_griffin_lim_pure_sine_shape_only():
    # A stationary tone has flat band envelopes, so envelope correlation is undefined noise.
    y = griffin_lim(log_mel(Waveform(sine(440.0))), iterations=60)
    assert len(y.samples) == 16000 and np.all(np.isfinite(y.samples))


def test_griffin_lim_modulated_tone_intelligibility():
    t = np.arange(SR) / SR
    x = (0.6 + 0.4 * np.sin(2 * np.pi * 3 * t)) * np.sin(2 * np.pi * 440 * t)
    y = griffin_lim(log_mel(Waveform(x)), iterations=60)
    assert stoi(x, y.samples) > 0.9  # achieved 0.927


def test_griffin_lim_speech_intelligibility():
    phones = [("s", 80), ("aa", 200), ("m", 80), ("ii", 160), ("f", 120), ("oo", 200), ("p", 80), ("eh", 200)]
    wav, _, _ = synth_utterance(phones, make_speaker(0), 0)
    y = griffin_lim(log_mel(wav), iterations=60)
    assert stoi(wav.samples, y.samples) > 0.93  # achieved 0.954
