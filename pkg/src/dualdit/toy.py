"""Feature-domain toy corpus for desk-scale training.

Each character owns a fixed spectral envelope over the lower three quarters of
the mel bins and each environment label a fixed envelope over the top quarter;
a mel is the per-frame character envelope (held for the character's duration)
plus the environment envelope. Keeping the environment in its own band means
MAS sees the same content evidence whatever the environment. Envelopes are
constant across pairs of mel bins, so a 4x4 patch holds at most 8 distinct
values and the corpus stays inside what the 16 -> 8 channel codec can
represent exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed import toy_text_embed

_SEED = 4242
CHAR_SCALE = 1.5
ENV_SCALE = 1.5

ENV_CAPTIONS = {
    "rain": "steady rain falling on a tin roof",
    "street": "busy street with passing car traffic",
}

# Texts without repeated characters (MAS ties between identical tokens are
# arbitrary) whose base durations already sum to 32 frames, so every duration
# is a function of the character alone.
TRAIN_TRIPLES = (
    ("bring home", "rain"),
    ("drive along", "street"),
    ("take down", "rain"),
    ("walk them", "street"),
)


@dataclass
class ToyExample:
    text: str
    env_label: str
    env_caption: str
    mel: np.ndarray
    durations: np.ndarray
    env_embedding: np.ndarray


def _coarse(key, n, scale):
    rng = np.random.default_rng([_SEED, *key])
    return np.repeat(rng.uniform(-scale, scale, size=-(-n // 2)), 2)[:n]


def _env_bins(mel_bins):
    return max(2, mel_bins // 4)


def char_envelope(c: str, mel_bins=16) -> np.ndarray:
    k = mel_bins - _env_bins(mel_bins)
    return np.concatenate([_coarse((1, ord(c)), k, CHAR_SCALE), np.zeros(mel_bins - k)])


def env_envelope(label: str, mel_bins=16) -> np.ndarray:
    k = _env_bins(mel_bins)
    return np.concatenate([np.zeros(mel_bins - k), _coarse((2, *label.encode()), k, ENV_SCALE)])


def toy_durations(text: str, n_frames: int) -> np.ndarray:
    """Character-dependent base durations (2-4 frames) stretched or squeezed to ``n_frames``."""
    if n_frames < len(text):
        raise ValueError("not enough frames for the text")
    d = np.array([2 + ord(c) % 3 for c in text], dtype=np.int64)
    i = 0
    while d.sum() < n_frames:
        d[i % d.size] += 1
        i += 1
    while d.sum() > n_frames:
        j = int(np.argmax(d))
        d[j] -= 1
    return d


def toy_mel(text: str, env_label: str, n_frames=32, mel_bins=16):
    d = toy_durations(text, n_frames)
    rows = np.repeat(np.stack([char_envelope(c, mel_bins) for c in text]), d, axis=0)
    return rows + env_envelope(env_label, mel_bins)[None, :], d


def make_example(text, env_label, n_frames=32, mel_bins=16, cond_dim=32) -> ToyExample:
    mel, d = toy_mel(text, env_label, n_frames, mel_bins)
    caption = ENV_CAPTIONS.get(env_label, env_label)
    return ToyExample(text, env_label, caption, mel, d, toy_text_embed(caption, cond_dim).vector)


def toy_corpus(triples=TRAIN_TRIPLES, n_frames=32, mel_bins=16, cond_dim=32) -> list[ToyExample]:
    return [make_example(t, e, n_frames, mel_bins, cond_dim) for t, e in triples]


def random_texts(n, rng, min_len=4, max_len=12, alphabet="abcdefghijklmnopqrstuvwxyz "):
    out = []
    for _ in range(n):
        k = int(rng.integers(min_len, max_len + 1))
        out.append("".join(rng.choice(list(alphabet), size=k)))
    return out
