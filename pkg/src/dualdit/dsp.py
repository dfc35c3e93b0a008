"""Signal processing: log-mel analysis, Griffin-Lim inversion, SNR mixing, RIR."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import signal

from .errors import ConfigError, FormatError, LengthError, UndefinedSNRError

logger = logging.getLogger(__name__)

DEFAULT_LOG_FLOOR = math.log(1e-5)
# generated mels are clamped here before exponentiation (e^12 is far above any
# magnitude a full-scale 16-bit frame produces)
MAX_LOG_MEL = 12.0


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise FormatError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise FormatError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise FormatError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        return rms(self.samples)


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    fft_size: int = 1024
    hop_length: int = 256
    window_length: int = 1024
    mel_bins: int = 80
    fmin_hz: float = 0.0
    fmax_hz: float | None = None
    log_floor: float = DEFAULT_LOG_FLOOR

    def __post_init__(self):
        if min(self.fft_size, self.hop_length, self.window_length, self.mel_bins) <= 0:
            raise ConfigError("STFT sizes and mel_bins must be positive")
        if not self.hop_length <= self.window_length <= self.fft_size:
            raise ConfigError("need hop_length <= window_length <= fft_size")
        if not 0.0 <= self.fmin_hz < self.fmax < self.sample_rate / 2 + 1e-9:
            raise ConfigError("need 0 <= fmin < fmax <= sample_rate / 2")

    @property
    def fmax(self) -> float:
        return self.sample_rate / 2 if self.fmax_hz is None else float(self.fmax_hz)

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-magnitude mel features, ``values`` shaped (frames, mel_bins)."""

    values: np.ndarray
    log_floor: float = DEFAULT_LOG_FLOOR
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or 0 in values.shape:
            raise FormatError("mel values must be a non-empty 2-D array")
        if not np.all(np.isfinite(values)):
            raise FormatError("mel values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def mel_bins(self) -> int:
        return self.values.shape[1]


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(cfg: StftConfig) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
    return edges[1:-1]


def mel_filterbank(cfg: StftConfig) -> np.ndarray:
    """HTK-style triangular filters with unit peak, shape (mel_bins, n_freqs)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
    freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_freqs)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def _window(cfg: StftConfig) -> np.ndarray:
    return signal.get_window("hann", cfg.window_length, fftbins=True)


def num_frames(n_samples: int, cfg: StftConfig) -> int:
    return 1 + (n_samples - cfg.window_length) // cfg.hop_length


def stft(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Uncentered STFT, shape (frames, n_freqs). No padding at either end."""
    n = num_frames(x.size, cfg)
    idx = np.arange(cfg.window_length)[None, :] + cfg.hop_length * np.arange(n)[:, None]
    frames = x[idx] * _window(cfg)[None, :]
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def istft(spec: np.ndarray, cfg: StftConfig, norm_floor: float = 0.1) -> np.ndarray:
    """Overlap-add inverse of :func:`stft` (Griffin & Lim's LSEE estimate).

    The squared-window sum is floored at ``norm_floor`` times its maximum so
    the ends of the signal, seen by a single near-zero window tail, do not
    blow up. ``norm_floor=0`` gives the exact least-squares inverse.
    """
    win = _window(cfg)
    n = spec.shape[0]
    length = (n - 1) * cfg.hop_length + cfg.window_length
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, : cfg.window_length]
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n):
        sl = slice(i * cfg.hop_length, i * cfg.hop_length + cfg.window_length)
        out[sl] += frames[i] * win
        norm[sl] += win * win
    return out / np.maximum(norm, norm_floor * norm.max() + 1e-12)


def _spectral_weights(cfg: StftConfig) -> np.ndarray:
    # rfft bins other than DC/Nyquist stand in for a conjugate pair
    w = np.full(cfg.n_freqs, 2.0)
    w[0] = 1.0
    if cfg.fft_size % 2 == 0:
        w[-1] = 1.0
    return w


def spectral_convergence(x: np.ndarray, target_mag: np.ndarray, cfg: StftConfig) -> float:
    """Relative distance between |STFT(x)| and a target magnitude."""
    w = _spectral_weights(cfg)[None, :]
    diff = np.abs(stft(x, cfg)) - target_mag
    denom = np.sqrt(np.sum(w * target_mag**2))
    num = np.sqrt(np.sum(w * diff**2))
    return float(num / denom) if denom > 0 else float(num)


def mel_spectrogram(w: Waveform, cfg: StftConfig) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(f"waveform is {w.sample_rate} Hz but config expects {cfg.sample_rate} Hz")
    if len(w) < cfg.window_length:
        raise LengthError(f"waveform has {len(w)} samples, fewer than window_length={cfg.window_length}")
    mag = np.abs(stft(w.samples, cfg))
    mel = mag @ mel_filterbank(cfg).T
    values = np.log(np.maximum(mel, math.exp(cfg.log_floor)))
    values = np.maximum(values, cfg.log_floor)
    return MelSpectrogram(values, log_floor=cfg.log_floor)


def mel_to_linear(m: MelSpectrogram, cfg: StftConfig) -> np.ndarray:
    """Approximate linear magnitudes through the filterbank pseudo-inverse."""
    if m.mel_bins != cfg.mel_bins:
        raise ConfigError(f"mel has {m.mel_bins} bins, config has {cfg.mel_bins}")
    values = m.values
    if np.any(values > MAX_LOG_MEL):
        logger.warning("clamping log-mel values above %g before inversion", MAX_LOG_MEL)
        values = np.minimum(values, MAX_LOG_MEL)
    energy = np.exp(values)
    energy[m.values <= cfg.log_floor] = 0.0
    return np.maximum(0.0, energy @ np.linalg.pinv(mel_filterbank(cfg)).T)


def griffin_lim(
    m: MelSpectrogram,
    cfg: StftConfig,
    iters: int = 64,
    seed: int = 0,
    return_errors: bool = False,
):
    """Invert a log-mel spectrogram to audio.

    Magnitudes come from the mel filterbank pseudo-inverse; phases are
    refined by alternating projections starting from seeded random phase.
    With ``return_errors`` the spectral convergence after every iteration is
    returned alongside the waveform.
    """
    if iters < 1:
        raise ConfigError("griffin_lim needs iters >= 1")
    target = mel_to_linear(m, cfg)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    x = istft(target * phase, cfg)
    errors = []
    for _ in range(iters):
        spec = stft(x, cfg)
        phase = np.exp(1j * np.angle(spec))
        x = istft(target * phase, cfg)
        errors.append(spectral_convergence(x, target, cfg))
    out = Waveform(x, cfg.sample_rate)
    return (out, errors) if return_errors else out


class MixInfo(NamedTuple):
    noise_gain: float
    peak_scale: float


def _fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    if noise.size >= n:
        return noise[:n]
    reps = -(-n // noise.size)
    return np.tile(noise, reps)[:n]


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, return_info: bool = False):
    """Add ``noise`` to ``clean`` so the speech-to-noise ratio is ``snr_db``.

    The noise is tiled or trimmed to the clean length first. If the mix would
    clip, the whole mix is rescaled (never clipped) so the ratio survives.
    """
    if clean.sample_rate != noise.sample_rate:
        raise FormatError(f"sample rate mismatch: {clean.sample_rate} vs {noise.sample_rate}")
    n = _fit_length(noise.samples, len(clean))
    rms_c, rms_n = rms(clean.samples), rms(n)
    if rms_c == 0.0 or rms_n == 0.0:
        raise UndefinedSNRError("SNR is undefined for a silent clean or noise signal")
    gain = rms_c / (rms_n * 10.0 ** (snr_db / 20.0))
    mix = clean.samples + gain * n
    peak = float(np.max(np.abs(mix)))
    scale = 1.0
    if peak > 1.0:
        scale = 1.0 / peak
        mix = mix * scale
        logger.info("mix peak %.4f exceeds 1, rescaled whole mix by %.6f", peak, scale)
    out = Waveform(mix, clean.sample_rate)
    return (out, MixInfo(gain, scale)) if return_info else out


def measured_snr(clean: np.ndarray, mix: np.ndarray, peak_scale: float = 1.0) -> float:
    """SNR in dB of ``mix`` given the clean component that went into it."""
    speech = peak_scale * np.asarray(clean, dtype=np.float64)
    residual = np.asarray(mix, dtype=np.float64) - speech
    return 20.0 * math.log10(rms(speech) / rms(residual))


def apply_rir(w: Waveform, rir: Waveform) -> Waveform:
    """Convolve with a room impulse response, keep the first len(w) samples,
    and rescale to the input RMS."""
    if w.sample_rate != rir.sample_rate:
        raise FormatError(f"sample rate mismatch: {w.sample_rate} vs {rir.sample_rate}")
    # direct method keeps short filters (and the unit impulse) exact
    method = "direct" if len(rir) <= 256 else "auto"
    y = signal.convolve(w.samples, rir.samples, mode="full", method=method)[: len(w)]
    target, got = rms(w.samples), rms(y)
    if got > 0.0:
        y = y * (target / got)
    return Waveform(y, w.sample_rate)
