"""Shared fixtures: synthetic audio corpora."""

import numpy as np
import pytest

from tokencodec import Waveform, write_wav


def speechlike_wave(seed: int, seconds: float = 2.0, sample_rate: int = 16000,
                    voiced_ratio: float = 0.6) -> Waveform:
    """Alternating harmonic bursts and digital silence; crude but enough
    to drive the energy VAD and give the quantizer structure."""
    rng = np.random.default_rng(seed)
    n = int(seconds * sample_rate)
    out = np.zeros(n)
    t = np.arange(n) / sample_rate
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.15, 0.4) * sample_rate)
        seg = min(seg, n - pos)
        if rng.random() < voiced_ratio:
            f0 = rng.uniform(100.0, 250.0)
            tt = t[pos : pos + seg]
            x = (
                0.25 * np.sin(2 * np.pi * f0 * tt)
                + 0.12 * np.sin(2 * np.pi * 2 * f0 * tt + 1.0)
                + 0.06 * np.sin(2 * np.pi * 3 * f0 * tt + 2.0)
            )
            out[pos : pos + seg] = x * (0.1 + 0.9 * np.hanning(seg))
        pos += seg
    return Waveform(out)


def tone_wave(seconds: float = 2.0, freq: float = 220.0, amp: float = 0.5) -> Waveform:
    t = np.arange(int(seconds * 16000)) / 16000
    return Waveform(amp * np.sin(2 * np.pi * freq * t))


@pytest.fixture(scope="session")
def wav_corpus(tmp_path_factory):
    """Directory of small speech-like WAV files."""
    root = tmp_path_factory.mktemp("corpus")
    for i in range(3):
        write_wav(root / f"fixture{i}.wav", speechlike_wave(seed=100 + i))
    return root
