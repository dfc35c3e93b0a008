"""Text encoder, monotonic alignment search, duration predictor and TTS losses."""

from __future__ import annotations

import math
import string

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DurationError, InfeasibleAlignmentError, ShapeError
from .layers import PreNormBlock, sinusoidal_embedding

VOCAB = "".join(c for c in string.printable if c not in "\t\n\r\x0b\x0c")
_CHAR_TO_ID = {c: i for i, c in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)


def tokenize(text: str) -> list[int]:
    """Character-level ids over printable ASCII."""
    if not text:
        raise ValueError("empty text")
    try:
        return [_CHAR_TO_ID[c] for c in text]
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} is outside the printable-ASCII vocabulary") from None


def pad_batch(seqs, pad=0):
    """List of id lists -> (LongTensor (B, L_max), BoolTensor mask)."""
    L = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), L), pad, dtype=torch.long)
    mask = torch.zeros(len(seqs), L, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


class TextEncoder(nn.Module):
    """Token embedding + sinusoidal positions + pre-norm self-attention blocks,
    projected to one mel-sized mean vector per token."""

    def __init__(self, mel_bins, width=64, num_blocks=2, num_heads=2, vocab_size=VOCAB_SIZE):
        super().__init__()
        self.width = width
        self.embed = nn.Embedding(vocab_size, width)
        nn.init.normal_(self.embed.weight, 0.0, width**-0.5)
        self.blocks = nn.ModuleList([PreNormBlock(width, num_heads, mlp_ratio=2.0) for _ in range(num_blocks)])
        self.norm = nn.LayerNorm(width)
        self.proj = nn.Linear(width, mel_bins)

    def forward(self, ids, mask=None):
        B, L = ids.shape
        if mask is None:
            mask = torch.ones(B, L, dtype=torch.bool, device=ids.device)
        x = self.embed(ids) * math.sqrt(self.width)
        pos = sinusoidal_embedding(torch.arange(L, device=ids.device), self.width).to(x.dtype)
        x = x + pos[None]
        for block in self.blocks:
            x = block(x, key_mask=mask)
        mu = self.proj(self.norm(x))
        return mu * mask[..., None].to(mu.dtype)


class _ChannelNorm(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class DurationPredictor(nn.Module):
    """Two conv layers with ReLU + channel LayerNorm, then a 1x1 projection to
    log-duration. Inputs are (B, L, M) token means."""

    def __init__(self, in_dim, filter_channels=64, kernel_size=3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(in_dim, filter_channels, kernel_size, padding=pad)
        self.norm1 = _ChannelNorm(filter_channels)
        self.conv2 = nn.Conv1d(filter_channels, filter_channels, kernel_size, padding=pad)
        self.norm2 = _ChannelNorm(filter_channels)
        self.proj = nn.Conv1d(filter_channels, 1, 1)

    def forward(self, mu, mask=None):
        x = mu.transpose(1, 2)
        m = torch.ones_like(x[:, :1]) if mask is None else mask[:, None].to(x.dtype)
        x = self.norm1(F.relu(self.conv1(x * m)))
        x = self.norm2(F.relu(self.conv2(x * m)))
        return (self.proj(x * m) * m).squeeze(1)


def encode_text(ids, encoder: TextEncoder) -> torch.Tensor:
    """Single sequence of token ids -> (L, M) token means."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.ndim != 1 or ids.numel() == 0:
        raise ValueError("encode_text expects a non-empty 1-D id sequence")
    if ids.min() < 0 or ids.max() >= encoder.embed.num_embeddings:
        raise ValueError("token id outside the vocabulary")
    return encoder(ids[None])[0]


def predict_durations(mu, predictor: DurationPredictor, mask=None) -> torch.Tensor:
    """Positive real durations (exp of the predicted log-duration)."""
    if mu.ndim == 2:
        return torch.exp(predictor(mu[None]))[0]
    return torch.exp(predictor(mu, mask))


def round_durations(d_hat) -> np.ndarray:
    """Round half up, clamp to at least one frame."""
    d = np.floor(np.asarray(d_hat, dtype=np.float64) + 0.5).astype(np.int64)
    return np.maximum(d, 1)


# ---------------------------------------------------------------------------
# Monotonic alignment search
# ---------------------------------------------------------------------------


def frame_log_likelihood(mu, y) -> np.ndarray:
    """(L, N) matrix of log N(y_j; mu_i, I)."""
    mu = np.asarray(mu, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sq = ((y[None, :, :] - mu[:, None, :]) ** 2).sum(-1)
    return -0.5 * sq - 0.5 * mu.shape[1] * math.log(2 * math.pi)


def alignment_score(mu, y, frame_to_token, ll=None) -> float:
    if ll is None:
        ll = frame_log_likelihood(mu, y)
    a = np.asarray(frame_to_token)
    return float(np.sum(ll[a, np.arange(a.size)]))


def check_alignment(frame_to_token, L: int) -> None:
    a = np.asarray(frame_to_token)
    steps = np.diff(a)
    if a.size == 0 or a[0] != 0 or a[-1] != L - 1 or np.any((steps != 0) & (steps != 1)):
        raise ValueError("alignment must start at 0, end at L-1 and advance by 0 or 1")


def mas(mu, y) -> np.ndarray:
    """Most likely monotonic surjective frame -> token map, O(L * N).

    Ties in the backtrace keep the current token.
    """
    ll = frame_log_likelihood(mu, y)
    L, N = ll.shape
    if N < L:
        raise InfeasibleAlignmentError(f"{N} frames cannot cover {L} tokens")
    Q = np.full((L, N), -np.inf)
    Q[0, 0] = ll[0, 0]
    for j in range(1, N):
        prev = Q[:, j - 1]
        advance = np.concatenate(([-np.inf], prev[:-1]))
        Q[:, j] = np.maximum(prev, advance) + ll[:, j]
    a = np.empty(N, dtype=np.int64)
    i = L - 1
    a[N - 1] = i
    for j in range(N - 1, 0, -1):
        if i > 0 and (i == j or Q[i - 1, j - 1] > Q[i, j - 1]):
            i -= 1
        a[j - 1] = i
    return a


def alignment_to_durations(frame_to_token, L: int) -> np.ndarray:
    return np.bincount(np.asarray(frame_to_token), minlength=L).astype(np.int64)


def _check_durations(d, N=None):
    d = np.asarray(d)
    if d.ndim != 1 or np.any(d < 1):
        raise DurationError("durations must be a 1-D sequence of integers >= 1")
    if N is not None and int(d.sum()) != N:
        raise DurationError(f"durations sum to {int(d.sum())}, expected {N}")
    return d


def upsample_by_duration(mu, d, N=None):
    """Repeat row i of ``mu`` d_i times. Works on numpy arrays and tensors."""
    d = _check_durations(d, N)
    if isinstance(mu, torch.Tensor):
        return torch.repeat_interleave(mu, torch.as_tensor(d, device=mu.device), dim=0)
    return np.repeat(np.asarray(mu), d, axis=0)


def alignment_matrix(durations, L: int, N: int, dtype=torch.float32) -> torch.Tensor:
    """One-hot (N, L) matrix with row j selecting the token that owns frame j.

    Frames beyond sum(d) are all-zero rows (padding).
    """
    d = _check_durations(durations)
    owner = np.repeat(np.arange(d.size), d)
    A = torch.zeros(N, L, dtype=dtype)
    A[np.arange(owner.size), owner] = 1.0
    return A


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def encoder_loss(mu_aligned, y, frame_mask=None):
    """Mean Gaussian NLL with identity covariance, constant term dropped.

    With ``frame_mask`` (B, N) only valid frames count toward the mean.
    """
    if mu_aligned.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(mu_aligned.shape)} vs {tuple(y.shape)}")
    sq = 0.5 * (y - mu_aligned) ** 2
    if frame_mask is None:
        return sq.mean()
    m = frame_mask[..., None].to(sq.dtype)
    return (sq * m).sum() / (m.sum() * y.shape[-1])


def duration_loss(d, d_hat, mask=None):
    """Sum over tokens of squared log-duration error, averaged over the batch."""
    if isinstance(d_hat, torch.Tensor):
        d = torch.as_tensor(d, dtype=d_hat.dtype)
        if torch.any(d <= 0) or torch.any(d_hat <= 0):
            raise DurationError("durations must be positive")
        sq = (torch.log(d) - torch.log(d_hat)) ** 2
        if mask is not None:
            sq = sq * mask.to(sq.dtype)
        return sq.sum(-1).mean() if sq.ndim > 1 else sq.sum()
    d, d_hat = np.asarray(d, dtype=np.float64), np.asarray(d_hat, dtype=np.float64)
    if np.any(d <= 0) or np.any(d_hat <= 0):
        raise DurationError("durations must be positive")
    return float(np.sum((np.log(d) - np.log(d_hat)) ** 2))


def log_duration_loss(d, log_d_hat, mask=None):
    """Same as :func:`duration_loss` but on predicted log-durations, so masked
    padding positions never hit a log of zero."""
    d = torch.as_tensor(d, dtype=log_d_hat.dtype)
    safe = torch.where(d > 0, d, torch.ones_like(d))
    sq = (torch.log(safe) - log_d_hat) ** 2
    if mask is not None:
        sq = sq * mask.to(sq.dtype)
    return sq.sum(-1).mean()
