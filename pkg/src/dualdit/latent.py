"""Mel <-> latent codec and the Latent Mapper.

The codec is a deterministic stand-in for a pretrained mel VAE: 4x4
space-to-depth followed by a learned 1x1 channel projection (16 -> 8), and the
mirror image for decoding. The Latent Mapper squeezes upsampled text features
into the same (8, N/4, M/4) grid so the two can be stacked channel-wise.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsp import DEFAULT_LOG_FLOOR
from .errors import ShapeError

FACTOR = 4


def pad_to_multiple(x, multiple=FACTOR, value=DEFAULT_LOG_FLOOR):
    """Pad the last two axes of ``x`` up to a multiple; returns (padded, (pad_rows, pad_cols))."""
    N, M = x.shape[-2:]
    pn, pm = (-N) % multiple, (-M) % multiple
    if pn or pm:
        x = F.pad(x, (0, pm, 0, pn), value=value)
    return x, (pn, pm)


def unpad(x, padding):
    pn, pm = padding
    N, M = x.shape[-2:]
    return x[..., : N - pn, : M - pm]


class MelCodec(nn.Module):
    def __init__(self, latent_channels=8, pad_value=DEFAULT_LOG_FLOOR):
        super().__init__()
        depth = FACTOR * FACTOR
        self.latent_channels = latent_channels
        self.pad_value = pad_value
        self.enc = nn.Conv2d(depth, latent_channels, 1)
        self.dec = nn.Conv2d(latent_channels, depth, 1)
        # multiplies latents so the diffusion model sees roughly unit variance
        self.register_buffer("scale", torch.ones(()))

    def encode(self, mel):
        """(B, N, M) -> ((B, C, N/4, M/4), padding)."""
        x, padding = pad_to_multiple(mel, FACTOR, self.pad_value)
        z = self.enc(F.pixel_unshuffle(x[:, None], FACTOR))
        return z * self.scale, padding

    def decode(self, z, padding=(0, 0)):
        if z.shape[1] != self.latent_channels:
            raise ShapeError(f"latent has {z.shape[1]} channels, codec expects {self.latent_channels}")
        x = F.pixel_shuffle(self.dec(z / self.scale), FACTOR)[:, 0]
        return unpad(x, padding)

    def identity_init(self):
        """Encoder keeps the first C depth channels, decoder writes them back."""
        with torch.no_grad():
            self.enc.weight.zero_()
            self.enc.bias.zero_()
            self.dec.weight.zero_()
            self.dec.bias.zero_()
            for c in range(self.latent_channels):
                self.enc.weight[c, c, 0, 0] = 1.0
                self.dec.weight[c, c, 0, 0] = 1.0
        return self


def vae_encode(mel, codec: MelCodec):
    """Accepts (N, M) or (B, N, M)."""
    single = mel.ndim == 2
    z, padding = codec.encode(mel[None] if single else mel)
    return (z[0] if single else z), padding


def vae_decode(z, codec: MelCodec, padding=(0, 0)):
    single = z.ndim == 3
    x = codec.decode(z[None] if single else z, padding)
    return x[0] if single else x


def fit_codec(codec: MelCodec, mels, steps=500, lr=1e-2, generator=None, batch_size=None):
    """Train the codec projections on reconstruction MSE, then set the latent scale.

    ``mels`` is a (B, N, M) tensor. Returns the list of per-step losses.
    """
    mels = torch.as_tensor(mels, dtype=codec.enc.weight.dtype)
    codec.scale.fill_(1.0)
    opt = torch.optim.Adam([p for p in codec.parameters()], lr=lr)
    losses = []
    for _ in range(steps):
        batch = mels
        if batch_size is not None and batch_size < len(mels):
            idx = torch.randperm(len(mels), generator=generator)[:batch_size]
            batch = mels[idx]
        z, padding = codec.encode(batch)
        loss = F.mse_loss(codec.decode(z, padding), batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    with torch.no_grad():
        z, _ = codec.encode(mels)
        std = float(z.std())
        codec.scale.fill_(1.0 / std if std > 0 else 1.0)
    return losses


class LatentMapper(nn.Module):
    """Two stride-2 3x3 convolutions: (B, N, M) features -> (B, C, N/4, M/4)."""

    def __init__(self, out_channels=8, hidden_channels=32, pad_value=0.0):
        super().__init__()
        self.pad_value = pad_value
        self.conv1 = nn.Conv2d(1, hidden_channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(hidden_channels, out_channels, 3, stride=2, padding=1)

    def forward(self, mu_up):
        x, _ = pad_to_multiple(mu_up, FACTOR, self.pad_value)
        return self.conv2(F.silu(self.conv1(x[:, None])))


def latent_map(mu_up, mapper: LatentMapper):
    single = mu_up.ndim == 2
    z = mapper(mu_up[None] if single else mu_up)
    return z[0] if single else z


def latent_shape(frames: int, mel_bins: int, channels: int = 8):
    return channels, math.ceil(frames / FACTOR), math.ceil(mel_bins / FACTOR)
