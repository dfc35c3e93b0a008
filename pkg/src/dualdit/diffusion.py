"""Noise schedule, forward process, epsilon-prediction loss, condition dropout,
dual classifier-free guidance and DDPM/DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ScheduleError, ShapeError


MAX_BETA = 0.999


class NoiseSchedule:
    """Discrete schedule over t = 1..T. ``alpha_bars[0]`` is the clean boundary (1)."""

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0 or np.any(betas <= 0) or np.any(betas >= 1):
            raise ScheduleError("betas must be a non-empty sequence in (0, 1)")
        self.T = betas.size
        self.betas = torch.from_numpy(betas)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(self.alphas, 0)])

    @classmethod
    def linear(cls, T=1000, beta_start=1e-4, beta_end=0.02):
        """Linear betas, stretched by 1000/T so short schedules still end near pure noise.

        Betas are capped at 0.999, which only matters for T < 50.
        """
        scale = 1000.0 / T
        return cls(np.minimum(np.linspace(scale * beta_start, scale * beta_end, T), MAX_BETA))

    def check(self, t):
        t = torch.as_tensor(t)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ScheduleError(f"timestep outside [1, {self.T}]")
        return t

    def alpha_bar(self, t, like=None):
        ab = self.alpha_bars[torch.as_tensor(t, dtype=torch.long)]
        if like is not None:
            ab = ab.to(like.dtype)
            while ab.ndim < like.ndim:
                ab = ab[..., None]
        return ab

    def timesteps(self, steps):
        """``steps`` descending timesteps spread over [T, 1]."""
        if steps < 0 or steps > self.T:
            raise ScheduleError(f"steps must lie in [0, {self.T}]")
        if steps == 0:
            return []
        if steps == 1:
            return [self.T]
        ts = np.floor(np.linspace(self.T, 1, steps) + 0.5).astype(int)
        return [int(t) for t in ts]


@dataclass
class ConditionPair:
    """Environment/content conditions for a batch.

    ``c_env`` is (B, E) or (B, k, E); ``c_cont`` is (B, C, H, W). ``None``
    means the learned null condition; the ``drop_*`` masks (B,) swap in the
    null per example.
    """

    c_env: torch.Tensor | None = None
    c_cont: torch.Tensor | None = None
    speaker: torch.Tensor | None = None
    drop_env: torch.Tensor | None = None
    drop_cont: torch.Tensor | None = None


@dataclass(frozen=True)
class GuidanceWeights:
    w_env: float = 5.0
    w_cont: float = 5.0

    def __post_init__(self):
        if not (np.isfinite(self.w_env) and np.isfinite(self.w_cont)):
            raise ConfigError("guidance weights must be finite")
        if self.w_env < 0 or self.w_cont < 0:
            raise ConfigError("guidance weights must be non-negative")


def q_sample(z0, t, eps, s: NoiseSchedule):
    if eps.shape != z0.shape:
        raise ShapeError("noise and clean latent shapes differ")
    t = s.check(t)
    ab = s.alpha_bar(t, like=z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def diffusion_loss(model, z0, t, cond: ConditionPair, eps, s: NoiseSchedule):
    """Mean squared error between the injected noise and the model's prediction."""
    z_t = q_sample(z0, t, eps, s)
    t = torch.as_tensor(t).expand(z0.shape[0]) if torch.as_tensor(t).ndim == 0 else torch.as_tensor(t)
    eps_hat = model(z_t, t, cond.c_env, cond.c_cont, cond.drop_env, cond.drop_cont, cond.speaker)
    return F.mse_loss(eps_hat, eps)


def dropout_conditions(cond: ConditionPair, p_env=0.1, p_cont=0.1, generator=None, batch_size=None):
    """Draw independent per-example null masks for the two conditions."""
    if not (0 <= p_env <= 1 and 0 <= p_cont <= 1):
        raise ConfigError("dropout probabilities must lie in [0, 1]")
    if batch_size is None:
        ref = cond.c_env if cond.c_env is not None else cond.c_cont
        batch_size = ref.shape[0]
    u = torch.rand(2, batch_size, generator=generator, dtype=torch.float64)
    return ConditionPair(
        c_env=cond.c_env,
        c_cont=cond.c_cont,
        speaker=cond.speaker,
        drop_env=u[0] < p_env,
        drop_cont=u[1] < p_cont,
    )


def guided_score(eps_cc, eps_e0, eps_0c, eps_00, w: GuidanceWeights):
    """eps(c_env, c_cont) + w_env (eps(c_env, 0) - eps(0, 0)) + w_cont (eps(0, c_cont) - eps(0, 0))."""
    if not (eps_cc.shape == eps_e0.shape == eps_0c.shape == eps_00.shape):
        raise ShapeError("guidance inputs must share one shape")
    return eps_cc + w.w_env * (eps_e0 - eps_00) + w.w_cont * (eps_0c - eps_00)


def guided_eps(model, z_t, t, cond: ConditionPair, w: GuidanceWeights, skip_zero=True):
    """Evaluate the model under the needed condition combinations in one batch
    and combine them. Zero-weight branches are skipped when ``skip_zero``."""
    B = z_t.shape[0]
    need_env = w.w_env != 0 or not skip_zero
    need_cont = w.w_cont != 0 or not skip_zero
    # (drop_env, drop_cont) per branch
    branches = [(False, False)]
    if need_env:
        branches.append((False, True))
    if need_cont:
        branches.append((True, False))
    if need_env or need_cont:
        branches.append((True, True))
    n = len(branches)
    rep = lambda x: None if x is None else x.repeat(n, *([1] * (x.ndim - 1)))
    drop_env = torch.tensor([b[0] for b in branches for _ in range(B)])
    drop_cont = torch.tensor([b[1] for b in branches for _ in range(B)])
    tt = torch.as_tensor(t).expand(B) if torch.as_tensor(t).ndim == 0 else torch.as_tensor(t)
    out = model(rep(z_t), tt.repeat(n), rep(cond.c_env), rep(cond.c_cont), drop_env, drop_cont, rep(cond.speaker))
    parts = dict(zip(branches, out.split(B)))
    eps_cc = parts[(False, False)]
    if n == 1:
        return eps_cc
    zero = parts[(True, True)]
    eps_e0 = parts.get((False, True), zero)
    eps_0c = parts.get((True, False), zero)
    return guided_score(eps_cc, eps_e0, eps_0c, zero, w)


def ddim_step(z_t, eps_hat, ab_t, ab_prev, eta=0.0, noise=None):
    """One generalized DDIM update. eta=0 is deterministic, eta=1 is ancestral."""
    x0 = (z_t - (1 - ab_t).sqrt() * eps_hat) / ab_t.sqrt()
    sigma = eta * ((1 - ab_prev) / (1 - ab_t)).sqrt() * (1 - ab_t / ab_prev).sqrt()
    direction = (1 - ab_prev - sigma**2).clamp(min=0).sqrt() * eps_hat
    z_prev = ab_prev.sqrt() * x0 + direction
    if eta > 0 and noise is not None:
        z_prev = z_prev + sigma * noise
    return z_prev


@torch.no_grad()
def sample(
    model,
    cond: ConditionPair,
    w: GuidanceWeights,
    s: NoiseSchedule,
    steps: int,
    shape,
    generator=None,
    mode: str = "deterministic",
    skip_zero: bool = True,
    dtype=torch.float32,
):
    """Generate latents of ``shape`` (B, C, H, W) starting from standard normal noise.

    ``model`` is any callable with the DualDiT forward signature.
    """
    if mode not in ("deterministic", "ancestral"):
        raise ConfigError(f"unknown sampling mode {mode!r}")
    ts = s.timesteps(steps)
    z = torch.randn(shape, generator=generator, dtype=dtype)
    eta = 0.0 if mode == "deterministic" else 1.0
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_hat = guided_eps(model, z, torch.tensor(t), cond, w, skip_zero=skip_zero)
        ab_t = s.alpha_bars[t].to(dtype)
        ab_prev = s.alpha_bars[t_prev].to(dtype)
        noise = torch.randn(shape, generator=generator, dtype=dtype) if eta > 0 and t_prev > 0 else None
        z = ddim_step(z, eps_hat, ab_t, ab_prev, eta, noise)
    return z
