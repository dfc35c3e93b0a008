"""Signal builders shared by the tests."""

import numpy as np

from dualdit.dsp import Waveform


def tone(freq, seconds=0.5, sr=16000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


def white(seconds=0.5, sr=16000, amp=0.1, seed=0):
    return Waveform(amp * np.random.default_rng(seed).standard_normal(int(seconds * sr)), sr)
