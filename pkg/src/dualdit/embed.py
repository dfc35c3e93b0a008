"""Condition embeddings: deterministic toy audio/text featurizers standing in for
a contrastive audio-text model, and the diffusion-based image-to-audio
embedding translator."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn

from . import io as dio
from .datagen import normalize_text
from .diffusion import NoiseSchedule, q_sample
from .dsp import StftConfig, Waveform, mel_spectrogram
from .errors import ConfigError, FormatError, ShapeError
from .layers import PreNormBlock, TimestepEmbedder

DEFAULT_DIM = 32
MODALITIES = ("audio", "text", "image", "translated")
_PROJECTION_SEED = 20240917


@dataclass(frozen=True)
class CondEmbedding:
    vector: np.ndarray
    modality: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("embedding must be a finite 1-D vector")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self):
        return self.vector.size


def _unit(v):
    n = np.linalg.norm(v)
    return v / n


@lru_cache(maxsize=None)
def _gaussian_projection(rows, cols, tag):
    rng = np.random.default_rng([_PROJECTION_SEED, rows, cols, tag])
    return rng.standard_normal((rows, cols)) / np.sqrt(cols)


@lru_cache(maxsize=None)
def _orthogonal_projection(dim):
    rng = np.random.default_rng([_PROJECTION_SEED, dim, 7])
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))[None, :]


def audio_features(w: Waveform, mel_bins=16) -> np.ndarray:
    """[1, band means (centered across bands), band stds] of a small log-mel."""
    win = 512 if w.sample_rate >= 8000 else 256
    cfg = StftConfig(sample_rate=w.sample_rate, fft_size=win, hop_length=win // 4, window_length=win, mel_bins=mel_bins)
    x = w.samples
    if x.size < win:
        x = np.pad(x, (0, win - x.size))
    mel = mel_spectrogram(Waveform(x, w.sample_rate), cfg).values
    mean, std = mel.mean(axis=0), mel.std(axis=0)
    return np.concatenate([[1.0], mean - mean.mean(), std])


def toy_audio_embed(w: Waveform, dim: int = DEFAULT_DIM) -> CondEmbedding:
    feats = audio_features(w)
    proj = _gaussian_projection(dim, feats.size, 1)
    return CondEmbedding(_unit(proj @ feats), "audio")


def _hash(word: str) -> int:
    return int.from_bytes(hashlib.blake2b(word.encode(), digest_size=8).digest(), "little")


def toy_text_embed(caption: str, dim: int = DEFAULT_DIM) -> CondEmbedding:
    """Signed hashed bag of words, rotated by a fixed orthogonal matrix."""
    words = normalize_text(caption)
    if not words:
        raise ValueError("empty caption")
    v = np.zeros(dim)
    counts = np.zeros(dim)
    for word in words:
        h = _hash(word)
        v[h % dim] += 1.0 if (h >> 32) & 1 else -1.0
        counts[h % dim] += 1.0
    if not np.any(v):
        v = counts
    return CondEmbedding(_unit(_orthogonal_projection(dim) @ v), "text")


# ---------------------------------------------------------------------------
# Image -> audio embedding translator
# ---------------------------------------------------------------------------


@dataclass
class TranslatorConfig:
    dim: int = DEFAULT_DIM
    hidden_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    T_steps: int = 50
    norm: str = "l2"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if self.norm not in ("l1", "l2"):
            raise ConfigError("norm must be 'l1' or 'l2'")


class I2ATranslator(nn.Module):
    """Transformer over [timestep, noisy audio embedding, image embedding,
    learnable token]; the output at the learnable token is the clean audio
    embedding estimate."""

    def __init__(self, cfg: TranslatorConfig = TranslatorConfig()):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden_dim
        self.t_embed = TimestepEmbedder(D)
        self.z_embed = nn.Linear(cfg.dim, D)
        self.y_embed = nn.Linear(cfg.dim, D)
        self.query = nn.Parameter(torch.randn(D) * 0.02)
        self.pos = nn.Parameter(torch.randn(4, D) * 0.02)
        self.blocks = nn.ModuleList([PreNormBlock(D, cfg.num_heads) for _ in range(cfg.num_blocks)])
        self.norm = nn.LayerNorm(D)
        self.out = nn.Linear(D, cfg.dim)

    def forward(self, t, z_t, y):
        if z_t.shape[-1] != self.cfg.dim or y.shape[-1] != self.cfg.dim:
            raise ShapeError(f"translator expects {self.cfg.dim}-dim embeddings")
        B = z_t.shape[0]
        tokens = torch.stack(
            [self.t_embed(t), self.z_embed(z_t), self.y_embed(y), self.query.expand(B, -1)], dim=1
        )
        x = tokens + self.pos[None]
        for block in self.blocks:
            x = block(x)
        return self.out(self.norm(x[:, 3]))

    def schedule(self):
        return NoiseSchedule.linear(self.cfg.T_steps)


def i2a_loss(model: I2ATranslator, z0, y, t, z_t, norm=None):
    """Batch mean of ||z0 - f(t, z_t, y)|| (L2 by default)."""
    norm = norm or model.cfg.norm
    if z0.shape != z_t.shape or z0.shape != y.shape:
        raise ShapeError("z0, z_t and y must share one shape")
    diff = z0 - model(t, z_t, y)
    if norm == "l1":
        return diff.abs().sum(-1).mean()
    return diff.pow(2).sum(-1).sqrt().mean()


def fit_translator(model: I2ATranslator, y, z0, steps=2000, lr=1e-3, batch_size=None, generator=None):
    """Train on paired (image, audio) embeddings; returns the loss history."""
    y = torch.as_tensor(np.asarray(y), dtype=torch.float32)
    z0 = torch.as_tensor(np.asarray(z0), dtype=torch.float32)
    if y.shape != z0.shape:
        raise ShapeError("image and audio embedding sets must have the same shape")
    s = model.schedule()
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    losses = []
    n = len(y)
    for _ in range(steps):
        idx = torch.arange(n) if batch_size is None or batch_size >= n else torch.randperm(n, generator=generator)[:batch_size]
        yb, zb = y[idx], z0[idx]
        t = torch.randint(1, s.T + 1, (len(idx),), generator=generator)
        eps = torch.randn(zb.shape, generator=generator)
        loss = i2a_loss(model, zb, yb, t, q_sample(zb, t, eps, s))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


@torch.no_grad()
def translate_image(model: I2ATranslator, y, steps=25, generator=None):
    """Map image embeddings (B, E) or (E,) to audio-space embeddings.

    Starts from noise at t = T, predicts the clean embedding, re-noises it to
    the next timestep and repeats; returns the last prediction.
    """
    y = torch.as_tensor(np.asarray(y), dtype=next(model.parameters()).dtype)
    single = y.ndim == 1
    if single:
        y = y[None]
    if y.shape[-1] != model.cfg.dim:
        raise ShapeError(f"image embedding has dim {y.shape[-1]}, translator expects {model.cfg.dim}")
    s = model.schedule()
    ts = s.timesteps(max(1, steps))
    z = torch.randn(y.shape, generator=generator, dtype=y.dtype)
    z0_hat = z
    for i, t in enumerate(ts):
        tt = torch.full((y.shape[0],), t, dtype=torch.long)
        z0_hat = model(tt, z, y)
        if i + 1 < len(ts):
            eps = torch.randn(y.shape, generator=generator, dtype=y.dtype)
            z = q_sample(z0_hat, ts[i + 1], eps, s)
    return z0_hat[0] if single else z0_hat


def save_translator(path, model: I2ATranslator) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    dio.save_checkpoint(path, tensors, {"kind": "i2a", "config": dataclasses.asdict(model.cfg)})


def load_translator(path) -> I2ATranslator:
    tensors, header = dio.load_checkpoint(path)
    if header.get("kind") != "i2a":
        raise FormatError(f"{path} is not a translator checkpoint")
    model = I2ATranslator(TranslatorConfig(**header["config"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    model.eval()
    return model
