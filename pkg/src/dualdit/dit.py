"""Dual-condition diffusion transformer.

Content (text latent) enters by channel concatenation with the noisy latent;
environment embeddings enter twice: pooled into the adaLN conditioning sum
and as keys/values of a cross-attention layer placed between self-attention
and the feed-forward layer. The ablation variants (text through
cross-attention, environment through adaLN only) are selectable in
:class:`DitConfig`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConditioningError, ConfigError
from .layers import Attention, Mlp, TimestepEmbedder, modulate, sincos_2d

TEXT_MODES = ("cat", "ca")
ENV_MODES = ("adaln", "adaln+ca")


@dataclass
class DitConfig:
    num_blocks: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    patch_size: int = 2
    cond_dim: int = 32
    latent_channels: int = 8
    content_channels: int = 8
    mlp_ratio: float = 4.0
    speaker_dim: int = 0
    text_cond: str = "cat"
    env_cond: str = "adaln+ca"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if min(self.num_blocks, self.hidden_dim, self.patch_size, self.cond_dim) <= 0:
            raise ConfigError("DiT sizes must be positive")
        if self.text_cond not in TEXT_MODES:
            raise ConfigError(f"text_cond must be one of {TEXT_MODES}")
        if self.env_cond not in ENV_MODES:
            raise ConfigError(f"env_cond must be one of {ENV_MODES}")

    def to_dict(self):
        return asdict(self)


def patchify(z, p):
    """(B, C, H, W) -> (B, H/p * W/p, C*p*p); also accepts unbatched (C, H, W)."""
    single = z.ndim == 3
    if single:
        z = z[None]
    B, C, H, W = z.shape
    if H % p or W % p:
        raise ConfigError(f"latent {H}x{W} not divisible by patch size {p}")
    x = z.reshape(B, C, H // p, p, W // p, p).permute(0, 2, 4, 1, 3, 5)
    x = x.reshape(B, (H // p) * (W // p), C * p * p)
    return x[0] if single else x


def unpatchify(x, channels, height, width, p):
    single = x.ndim == 2
    if single:
        x = x[None]
    B = x.shape[0]
    h, w = height // p, width // p
    z = x.reshape(B, h, w, channels, p, p).permute(0, 3, 1, 4, 2, 5)
    z = z.reshape(B, channels, height, width)
    return z[0] if single else z


class DualDiTBlock(nn.Module):
    def __init__(self, hidden, num_heads, mlp_ratio=4.0, cross_attention=True):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden, num_heads)
        self.cross_attention = cross_attention
        if cross_attention:
            self.norm_ca = nn.LayerNorm(hidden, eps=1e-6)
            self.cross_attn = Attention(hidden, num_heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(hidden, int(hidden * mlp_ratio))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))

    def forward(self, x, c, context=None):
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        if self.cross_attention and context is not None:
            x = x + self.cross_attn(self.norm_ca(x), context=context)
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class FinalLayer(nn.Module):
    def __init__(self, hidden, patch_size, out_channels):
        super().__init__()
        self.norm_final = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(hidden, patch_size * patch_size * out_channels)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


class DualDiT(nn.Module):
    def __init__(self, cfg: DitConfig = DitConfig()):
        super().__init__()
        self.cfg = cfg
        p, D = cfg.patch_size, cfg.hidden_dim
        in_ch = cfg.latent_channels + (cfg.content_channels if cfg.text_cond == "cat" else 0)
        self.x_embed = nn.Linear(in_ch * p * p, D)
        self.t_embed = TimestepEmbedder(D)
        self.env_embed = nn.Linear(cfg.cond_dim, D)
        self.use_env_ca = cfg.env_cond == "adaln+ca"
        self.use_text_ca = cfg.text_cond == "ca"
        if self.use_env_ca:
            self.env_context = nn.Linear(cfg.cond_dim, D)
        if self.use_text_ca:
            self.text_context = nn.Linear(cfg.content_channels * p * p, D)
        if cfg.speaker_dim:
            self.speaker_embed = nn.Linear(cfg.speaker_dim, D)
        self.null_env = nn.Parameter(torch.randn(cfg.cond_dim) * cfg.cond_dim**-0.5)
        self.null_cont = nn.Parameter(torch.zeros(cfg.content_channels))
        has_ca = self.use_env_ca or self.use_text_ca
        self.blocks = nn.ModuleList(
            [DualDiTBlock(D, cfg.num_heads, cfg.mlp_ratio, cross_attention=has_ca) for _ in range(cfg.num_blocks)]
        )
        self.final_layer = FinalLayer(D, p, cfg.latent_channels)
        self.initialize_weights()

    def initialize_weights(self):
        def _basic_init(module):
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)

        self.apply(_basic_init)
        nn.init.normal_(self.t_embed.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embed.mlp[2].weight, std=0.02)
        # adaLN-Zero: every residual branch starts gated off, output starts at zero
        for block in self.blocks:
            nn.init.zeros_(block.adaLN_modulation[-1].weight)
            nn.init.zeros_(block.adaLN_modulation[-1].bias)
            if block.cross_attention:
                nn.init.zeros_(block.cross_attn.proj.weight)
                nn.init.zeros_(block.cross_attn.proj.bias)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.linear.weight)
        nn.init.zeros_(self.final_layer.linear.bias)

    def null_conditions(self, latent_shape):
        """(null env vector (E,), null content latent shaped ``latent_shape``)."""
        C, H, W = latent_shape
        return self.null_env, self.null_cont[:, None, None].expand(C, H, W)

    def resolve_conditions(self, z_t, c_env=None, c_cont=None, drop_env=None, drop_cont=None):
        """Substitute learned null embeddings where a condition is absent or dropped."""
        B, C, H, W = z_t.shape
        E = self.cfg.cond_dim
        null_env = self.null_env.to(z_t.dtype)
        null_cont = self.null_cont.to(z_t.dtype)[None, :, None, None].expand(B, self.cfg.content_channels, H, W)
        if c_env is None:
            env = null_env[None, None, :].expand(B, 1, E)
        else:
            if c_env.ndim == 2:
                c_env = c_env[:, None, :]
            if c_env.shape[0] != B or c_env.shape[-1] != E:
                raise ConditioningError(f"env condition {tuple(c_env.shape)} does not fit batch {B} / dim {E}")
            env = c_env.to(z_t.dtype)
            if drop_env is not None:
                env = torch.where(drop_env[:, None, None], null_env[None, None, :].expand_as(env), env)
        if c_cont is None:
            cont = null_cont
        else:
            if c_cont.shape != (B, self.cfg.content_channels, H, W):
                raise ConditioningError(f"content latent {tuple(c_cont.shape)} does not match noisy latent {tuple(z_t.shape)}")
            cont = c_cont.to(z_t.dtype)
            if drop_cont is not None:
                cont = torch.where(drop_cont[:, None, None, None], null_cont, cont)
        return env, cont

    def forward(self, z_t, t, c_env=None, c_cont=None, drop_env=None, drop_cont=None, speaker=None):
        cfg, p = self.cfg, self.cfg.patch_size
        B, C, H, W = z_t.shape
        if C != cfg.latent_channels:
            raise ConditioningError(f"noisy latent has {C} channels, expected {cfg.latent_channels}")
        env, cont = self.resolve_conditions(z_t, c_env, c_cont, drop_env, drop_cont)

        x = torch.cat([z_t, cont], dim=1) if cfg.text_cond == "cat" else z_t
        ph, pw = (-H) % p, (-W) % p
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
            cont = F.pad(cont, (0, pw, 0, ph))
        Hp, Wp = H + ph, W + pw
        pos = sincos_2d(cfg.hidden_dim, Hp // p, Wp // p).to(z_t.dtype)
        tokens = self.x_embed(patchify(x, p)) + pos[None]

        c = self.t_embed(t) + self.env_embed(env.mean(dim=1))
        if speaker is not None:
            if not cfg.speaker_dim:
                raise ConditioningError("model was built without speaker conditioning")
            c = c + self.speaker_embed(speaker.to(z_t.dtype))

        context = []
        if self.use_env_ca:
            context.append(self.env_context(env))
        if self.use_text_ca:
            context.append(self.text_context(patchify(cont, p)) + pos[None])
        context = torch.cat(context, dim=1) if context else None

        for block in self.blocks:
            tokens = block(tokens, c, context)
        out = unpatchify(self.final_layer(tokens, c), cfg.latent_channels, Hp, Wp, p)
        return out[:, :, :H, :W]


def dit_forward(z_t, t, cond, model: DualDiT):
    """Functional wrapper: ``cond`` is a :class:`~dualdit.diffusion.ConditionPair`-like
    object with ``c_env``, ``c_cont`` and optional ``speaker``."""
    return model(z_t, t, cond.c_env, cond.c_cont, speaker=getattr(cond, "speaker", None))
