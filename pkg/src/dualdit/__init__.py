"""Dual-condition diffusion transformer for environment-aware speech synthesis."""

from .diffusion import ConditionPair, GuidanceWeights, NoiseSchedule, guided_score, sample
from .dit import DitConfig, DualDiT
from .dsp import StftConfig, Waveform, griffin_lim, mel_spectrogram, mix_at_snr
from .embed import I2ATranslator, TranslatorConfig, toy_audio_embed, toy_text_embed, translate_image
from .errors import DualDitError
from .latent import LatentMapper, MelCodec
from .metrics import clap_score, frechet_distance, wer_report
from .tts import DurationPredictor, TextEncoder, mas

__version__ = "0.1.0"

__all__ = [
    "ConditionPair",
    "DitConfig",
    "DualDiT",
    "DualDitError",
    "DurationPredictor",
    "GuidanceWeights",
    "I2ATranslator",
    "LatentMapper",
    "MelCodec",
    "NoiseSchedule",
    "StftConfig",
    "TextEncoder",
    "TranslatorConfig",
    "Waveform",
    "clap_score",
    "frechet_distance",
    "griffin_lim",
    "guided_score",
    "mas",
    "mel_spectrogram",
    "mix_at_snr",
    "sample",
    "toy_audio_embed",
    "toy_text_embed",
    "translate_image",
    "wer_report",
]
