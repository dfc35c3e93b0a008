"""Full generation stack (TTS module + Latent Mapper + Dual-DiT + codec) and
its training loop with checkpointing."""

from __future__ import annotations

import base64
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io as dio
from .io import read_wav
from .datagen import read_manifest, resolve
from .diffusion import ConditionPair, GuidanceWeights, NoiseSchedule, dropout_conditions, q_sample, sample
from .dit import DitConfig, DualDiT
from .dsp import StftConfig, mel_spectrogram
from .embed import toy_text_embed
from .errors import ConfigError, ShapeError
from .latent import LatentMapper, MelCodec, fit_codec
from .toy import toy_corpus
from .tts import (
    DurationPredictor,
    TextEncoder,
    alignment_matrix,
    alignment_to_durations,
    encoder_loss,
    log_duration_loss,
    mas,
    pad_batch,
    round_durations,
    tokenize,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Flat training/model configuration; every key can be set from a JSON file."""

    seed: int = 0
    deterministic: bool = True
    data: str = "toy"
    n_frames: int = 32
    mel_bins: int = 16
    sample_rate: int = 16000
    fft_size: int = 1024
    hop_length: int = 256
    window_length: int = 1024
    # TTS module
    encoder_width: int = 64
    encoder_blocks: int = 2
    encoder_heads: int = 2
    dp_filter_channels: int = 64
    # latent space
    latent_channels: int = 8
    mapper_hidden: int = 32
    codec_steps: int = 300
    codec_lr: float = 1e-2
    # Dual-DiT
    dit_blocks: int = 2
    dit_hidden: int = 64
    dit_heads: int = 4
    patch_size: int = 2
    cond_dim: int = 32
    mlp_ratio: float = 4.0
    speaker_dim: int = 0
    text_cond: str = "cat"
    env_cond: str = "adaln+ca"
    # diffusion
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    p_env: float = 0.1
    p_cont: float = 0.1
    # optimization
    pretrain_steps: int = 1000
    finetune_steps: int = 0
    lr: float = 1e-4
    finetune_lr_factor: float = 0.5
    # "constant", or "cosine": decay to lr_min_factor * lr over each phase
    lr_schedule: str = "constant"
    lr_min_factor: float = 0.0
    # constant learning rate for the duration predictor; None follows the schedule
    dp_lr: float | None = None
    weight_decay: float = 0.0
    batch_size: int = 4
    freeze_tts: bool = False
    # inference defaults
    w_env: float = 5.0
    w_cont: float = 5.0
    sample_steps: int = 50
    # bookkeeping
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.n_frames <= 0 or self.mel_bins <= 0:
            raise ConfigError("n_frames and mel_bins must be positive")
        if self.pretrain_steps < 0 or self.finetune_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def total_steps(self):
        return self.pretrain_steps + self.finetune_steps

    def dit_config(self) -> DitConfig:
        return DitConfig(
            num_blocks=self.dit_blocks,
            hidden_dim=self.dit_hidden,
            num_heads=self.dit_heads,
            patch_size=self.patch_size,
            cond_dim=self.cond_dim,
            latent_channels=self.latent_channels,
            content_channels=self.latent_channels,
            mlp_ratio=self.mlp_ratio,
            speaker_dim=self.speaker_dim,
            text_cond=self.text_cond,
            env_cond=self.env_cond,
        )

    def stft_config(self) -> StftConfig:
        return StftConfig(
            sample_rate=self.sample_rate,
            fft_size=self.fft_size,
            hop_length=self.hop_length,
            window_length=self.window_length,
            mel_bins=self.mel_bins,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# Desk-scale settings that overfit the toy corpus within 5,000 steps on one
# CPU core. The default constant 1e-4 needs far longer than that.
TOY_OVERRIDES = {
    "lr": 1e-3,
    "lr_schedule": "cosine",
    "dp_lr": 1e-3,
    "batch_size": 16,
    "pretrain_steps": 3000,
    "finetune_steps": 2000,
}


class VoiceModel(nn.Module):
    """Text -> time-aligned features -> content latent, plus the Dual-DiT
    denoiser and the frozen mel codec."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = TextEncoder(cfg.mel_bins, cfg.encoder_width, cfg.encoder_blocks, cfg.encoder_heads)
        self.duration_predictor = DurationPredictor(cfg.mel_bins, cfg.dp_filter_channels)
        self.mapper = LatentMapper(cfg.latent_channels, cfg.mapper_hidden)
        self.dit = DualDiT(cfg.dit_config())
        self.codec = MelCodec(cfg.latent_channels, pad_value=0.0)
        self.register_buffer("mel_mean", torch.zeros(()))
        self.register_buffer("mel_std", torch.ones(()))

    def tts_parameters(self):
        return list(self.encoder.parameters()) + list(self.duration_predictor.parameters())

    def schedule(self) -> NoiseSchedule:
        c = self.cfg
        return NoiseSchedule.linear(c.diffusion_steps, c.beta_start, c.beta_end)

    def normalize(self, mel):
        return (mel - self.mel_mean) / self.mel_std

    def denormalize(self, mel):
        return mel * self.mel_std + self.mel_mean

    def encode_texts(self, texts):
        ids, mask = pad_batch([tokenize(t) for t in texts])
        return self.encoder(ids, mask), mask

    def content_latent(self, mu, durations, n_frames):
        """Upsample token means by per-example durations and map to the latent grid."""
        B, L, _ = mu.shape
        A = torch.stack([alignment_matrix(d, L, n_frames, mu.dtype) for d in durations])
        mu_up = A @ mu
        return self.mapper(mu_up), mu_up

    def align(self, mu, mask, mels, n_frames):
        """MAS per example on detached features; returns integer durations."""
        out = []
        mu_np = mu.detach().double().numpy()
        for b in range(mu.shape[0]):
            L = int(mask[b].sum())
            N = int(n_frames[b])
            a = mas(mu_np[b, :L], mels[b, :N].detach().double().numpy())
            out.append(alignment_to_durations(a, L))
        return out

    def losses(self, texts, mels, n_frames, env, generator, drop=True, train_tts=True):
        """Training losses for one batch of normalized mels (B, N, M)."""
        cfg = self.cfg
        B, N, M = mels.shape
        mu, mask = self.encode_texts(texts)
        durations = self.align(mu, mask, mels, n_frames)
        c_cont, mu_up = self.content_latent(mu, durations, N)
        frame_mask = torch.arange(N)[None, :] < torch.as_tensor(n_frames)[:, None]
        l_enc = encoder_loss(mu_up, mels, frame_mask)
        d_target = torch.zeros(mask.shape, dtype=mu.dtype)
        for b, d in enumerate(durations):
            d_target[b, : d.size] = torch.as_tensor(d, dtype=mu.dtype)
        log_d_hat = self.duration_predictor(mu.detach(), mask)
        l_dp = log_duration_loss(d_target, log_d_hat, mask)

        with torch.no_grad():
            z0, _ = self.codec.encode(mels)
        s = self.schedule()
        t = torch.randint(1, s.T + 1, (B,), generator=generator)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        cond = ConditionPair(c_env=env, c_cont=c_cont)
        if drop:
            cond = dropout_conditions(cond, cfg.p_env, cfg.p_cont, generator=generator, batch_size=B)
        z_t = q_sample(z0, t, eps, s)
        eps_hat = self.dit(z_t, t, cond.c_env, cond.c_cont, cond.drop_env, cond.drop_cont)
        l_diff = F.mse_loss(eps_hat, eps)
        total = l_diff + (l_enc + l_dp if train_tts else 0.0)
        return {"total": total, "diff": l_diff, "enc": l_enc, "dp": l_dp}

    @torch.no_grad()
    def predicted_durations(self, texts):
        mu, mask = self.encode_texts(texts)
        log_d = self.duration_predictor(mu, mask)
        return [round_durations(torch.exp(log_d[b, : int(mask[b].sum())]).numpy()) for b in range(len(texts))]

    @torch.no_grad()
    def mas_durations(self, texts, mels):
        """Durations MAS assigns to ``mels`` (raw, un-normalized) under the current encoder."""
        mels = [torch.as_tensor(np.asarray(m), dtype=torch.float32) for m in mels]
        n = [m.shape[0] for m in mels]
        padded = torch.zeros(len(mels), max(n), self.cfg.mel_bins)
        for b, m in enumerate(mels):
            padded[b, : n[b]] = self.normalize(m)
        mu, mask = self.encode_texts(texts)
        return self.align(mu, mask, padded, n)

    @torch.no_grad()
    def generate(self, text, env, w: GuidanceWeights, steps, seed=0, mode="deterministic", skip_zero=True,
                 return_latent=False):
        """Synthesize one mel (frames, mel_bins) from content text and an env embedding.

        ``env`` is (E,) or (k, E); ``None`` uses the null environment.
        """
        mu, mask = self.encode_texts([text])
        d = round_durations(torch.exp(self.duration_predictor(mu, mask))[0].numpy())
        N = int(d.sum())
        c_cont, _ = self.content_latent(mu, [d], N)
        c_env = None
        if env is not None:
            c_env = torch.as_tensor(np.asarray(env), dtype=torch.float32)
            if c_env.shape[-1] != self.cfg.cond_dim:
                raise ShapeError(f"env embedding has dim {c_env.shape[-1]}, model expects {self.cfg.cond_dim}")
            c_env = c_env.reshape(1, -1, self.cfg.cond_dim)
        g = torch.Generator().manual_seed(int(seed))
        z = sample(self.dit, ConditionPair(c_env=c_env, c_cont=c_cont), w, self.schedule(), steps,
                   c_cont.shape, generator=g, mode=mode, skip_zero=skip_zero)
        mel = self.denormalize(self.codec.decode(z, (0, 0))[0, :N])
        return (mel.numpy(), z) if return_latent else mel.numpy()


@dataclass
class TrainingExample:
    text: str
    mel: np.ndarray
    env: np.ndarray


def load_training_examples(cfg: TrainConfig, base_dir=None) -> list[TrainingExample]:
    """``cfg.data == "toy"`` gives the built-in toy corpus; otherwise it is a
    manifest path whose entries provide audio, transcript and env caption.
    Mels are cropped to ``cfg.n_frames``."""
    if cfg.data == "toy":
        return [TrainingExample(e.text, e.mel, e.env_embedding)
                for e in toy_corpus(n_frames=cfg.n_frames, mel_bins=cfg.mel_bins, cond_dim=cfg.cond_dim)]
    path = Path(cfg.data)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    stft_cfg = cfg.stft_config()
    out = []
    for entry in read_manifest(path):
        if not entry.env_caption:
            raise ConfigError(f"entry {entry.id or entry.audio_path} has no env caption")
        mel = mel_spectrogram(read_wav(resolve(entry, path.parent)), stft_cfg).values[: cfg.n_frames]
        env = toy_text_embed(entry.env_caption, cfg.cond_dim).vector
        out.append(TrainingExample(entry.transcript, mel, env))
    return out


def _gen_state_to_str(g: torch.Generator) -> str:
    return base64.b64encode(g.get_state().numpy().tobytes()).decode()


def _gen_state_from_str(s: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy())


class Trainer:
    """Owns a :class:`VoiceModel`, its optimizer and RNG for the whole run.

    Steps ``[0, pretrain_steps)`` train everything with the diffusion,
    encoder and duration losses; later steps freeze the TTS module, use only
    the diffusion loss and scale the learning rate by ``finetune_lr_factor``.
    """

    def __init__(self, cfg: TrainConfig, examples, checkpoint=None):
        self.cfg = cfg
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(cfg.seed)
        self.model = VoiceModel(cfg)
        self.examples = list(examples)
        if not self.examples:
            raise ConfigError("no training examples")
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step_count = 0
        self.history = []
        self._prepare_data()
        self._build_optimizer()
        if checkpoint is not None:
            self.model.codec.requires_grad_(False)
            self.load(checkpoint)
        else:
            self._fit_codec()
        self._apply_phase()

    def _prepare_data(self):
        cfg = self.cfg
        mels = [np.asarray(e.mel, dtype=np.float64) for e in self.examples]
        for m in mels:
            if m.ndim != 2 or m.shape[1] != cfg.mel_bins:
                raise ShapeError(f"training mel has shape {m.shape}, expected (*, {cfg.mel_bins})")
        self.n_frames = [m.shape[0] for m in mels]
        N = max(self.n_frames)
        N += (-N) % 4
        stacked = np.concatenate(mels, axis=0)
        mean, std = (0.0, 1.0) if cfg.data == "toy" else (float(stacked.mean()), float(stacked.std()) or 1.0)
        self.model.mel_mean.fill_(mean)
        self.model.mel_std.fill_(std)
        padded = torch.zeros(len(mels), N, cfg.mel_bins)
        for b, m in enumerate(mels):
            padded[b, : m.shape[0]] = (torch.as_tensor(m, dtype=torch.float32) - mean) / std
        self.mels = padded
        self.env = torch.stack([torch.as_tensor(np.asarray(e.env), dtype=torch.float32).reshape(-1, cfg.cond_dim)
                                for e in self.examples])
        self.texts = [e.text for e in self.examples]

    def _fit_codec(self):
        fit_codec(self.model.codec, self.mels, steps=self.cfg.codec_steps, lr=self.cfg.codec_lr)
        self.model.codec.requires_grad_(False)

    def _build_optimizer(self):
        tts = {id(p) for p in self.model.tts_parameters()}
        codec = {id(p) for p in self.model.codec.parameters()}
        rest = [p for p in self.model.parameters() if id(p) not in tts and id(p) not in codec]
        groups = [
            {"params": list(self.model.encoder.parameters()), "name": "encoder"},
            {"params": list(self.model.duration_predictor.parameters()), "name": "duration"},
            {"params": rest, "name": "rest"},
        ]
        self.optimizer = torch.optim.AdamW(
            groups,
            lr=self.cfg.lr,
            weight_decay=self.cfg.weight_decay,
        )

    @property
    def in_finetune(self):
        return self.step_count >= self.cfg.pretrain_steps

    def tts_frozen(self):
        return self.cfg.freeze_tts or self.in_finetune

    def _apply_phase(self):
        frozen = self.tts_frozen()
        for p in self.model.tts_parameters():
            p.requires_grad_(not frozen)
            if frozen:
                p.grad = None
        lr = self.current_lr()
        for group in self.optimizer.param_groups:
            fixed = group["name"] == "duration" and self.cfg.dp_lr is not None
            group["lr"] = self.cfg.dp_lr if fixed else lr

    def current_lr(self):
        cfg = self.cfg
        if self.in_finetune:
            base, start, length = cfg.lr * cfg.finetune_lr_factor, cfg.pretrain_steps, cfg.finetune_steps
        else:
            base, start, length = cfg.lr, 0, cfg.pretrain_steps
        if cfg.lr_schedule == "constant" or length <= 1:
            return base
        frac = min(1.0, (self.step_count - start) / (length - 1))
        lo = base * cfg.lr_min_factor
        return lo + 0.5 * (base - lo) * (1 + math.cos(math.pi * frac))

    def _batch_indices(self):
        n, b = len(self.examples), self.cfg.batch_size
        if b % n == 0:
            # every example b/n times, each copy with its own t and noise
            return torch.arange(n).repeat(b // n)
        if b > n:
            return torch.randint(0, n, (b,), generator=self.generator)
        return torch.randperm(n, generator=self.generator)[:b]

    def step(self):
        self._apply_phase()
        self.model.train()
        idx = self._batch_indices()
        texts = [self.texts[i] for i in idx.tolist()]
        n_frames = [self.n_frames[i] for i in idx.tolist()]
        losses = self.model.losses(texts, self.mels[idx], n_frames, self.env[idx], self.generator,
                                   train_tts=not self.tts_frozen())
        self.optimizer.zero_grad(set_to_none=True)
        losses["total"].backward()
        self.optimizer.step()
        self.step_count += 1
        record = {"step": self.step_count, **{k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in losses.items()}}
        self.history.append(record)
        return record

    def train(self, steps=None, checkpoint_dir=None, log_path=None):
        target = self.cfg.total_steps if steps is None else self.step_count + steps
        log = open(log_path, "a") if log_path else None
        try:
            while self.step_count < target:
                rec = self.step()
                if log:
                    log.write(json.dumps(rec, sort_keys=True) + "\n")
                if self.cfg.log_every and rec["step"] % self.cfg.log_every == 0:
                    logger.info("step %d diff %.4f enc %.4f dp %.4f", rec["step"], rec["diff"], rec["enc"], rec["dp"])
                if checkpoint_dir and self.cfg.checkpoint_every and rec["step"] % self.cfg.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"step{rec['step']:07d}.ckpt")
        finally:
            if log:
                log.close()
        self._apply_phase()
        return self.history

    # -- checkpoints --------------------------------------------------------

    def state_tensors(self):
        tensors = {f"model/{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        names = {id(p): n for n, p in self.model.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                st = self.optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                tensors[f"optim/{n}/exp_avg"] = st["exp_avg"].numpy()
                tensors[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
                tensors[f"optim/{n}/step"] = np.asarray(float(st["step"]), dtype=np.float32)
        return tensors

    def header(self):
        return {
            "kind": "voice-model",
            "config": self.cfg.to_dict(),
            "step": self.step_count,
            "rng_state": _gen_state_to_str(self.generator),
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        dio.save_checkpoint(path, self.state_tensors(), self.header())

    def load(self, path):
        tensors, header = dio.load_checkpoint(path)
        load_model_tensors(self.model, tensors)
        params = dict(self.model.named_parameters())
        for n, p in params.items():
            key = f"optim/{n}/exp_avg"
            if key in tensors:
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(tensors[f"optim/{n}/step"])),
                    "exp_avg": torch.from_numpy(tensors[key].copy()),
                    "exp_avg_sq": torch.from_numpy(tensors[f"optim/{n}/exp_avg_sq"].copy()),
                }
        self.step_count = int(header["step"])
        self.generator.set_state(_gen_state_from_str(header["rng_state"]))


def load_model_tensors(model: VoiceModel, tensors, prefix="model/"):
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected:
        raise ConfigError(f"unexpected tensors in checkpoint: {unexpected}")
    return missing


def load_voice_model(path) -> VoiceModel:
    tensors, header = dio.load_checkpoint(path, prefix="model/")
    cfg = TrainConfig.from_dict(header["config"])
    torch.manual_seed(cfg.seed)
    model = VoiceModel(cfg)
    missing = load_model_tensors(model, tensors)
    if missing:
        raise ConfigError(f"checkpoint lacks tensors: {missing}")
    model.eval()
    return model


class TrainingLock:
    """Exclusive lock file so only one trainer writes a checkpoint directory."""

    def __init__(self, directory):
        self.path = Path(directory) / ".train.lock"
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.path.parent} is locked by another training run") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        self.path.unlink(missing_ok=True)
