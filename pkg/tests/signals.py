"""Speech-like test signals and degraded copies."""

import numpy as np
from scipy.signal import lfilter

from lipunit.synth import make_speaker, random_phones, synth_utterance


def speech(seed, speaker=0):
    rng = np.random.default_rng(seed)
    wav, _, _ = synth_utterance(random_phones(rng, 4, 4), make_speaker(speaker), seed)
    return wav.samples


def at_snr(x, snr_db, seed):
    noise = np.random.default_rng(seed).standard_normal(len(x))
    noise *= np.sqrt(np.mean(x ** 2) / np.mean(noise ** 2)) / 10 ** (snr_db / 20)
    return x + noise


def fixture_pairs():
    pairs = []
    for i in range(10):
        x = speech(100 + i, speaker=i % 3)
        kind = i % 5
        if kind == 0:
            y = at_snr(x, 20, i)
        elif kind == 1:
            y = at_snr(x, 0, i)
        elif kind == 2:
            y = lfilter([0.25, 0.5, 0.25], [1.0], x)
        elif kind == 3:
            y = np.random.default_rng(i).standard_normal(len(x))
        else:
            y = np.roll(x, 400) * 0.5 + at_snr(x, 10, i) * 0.5
        pairs.append((x, y))
    return pairs


PAIRS = fixture_pairs()
