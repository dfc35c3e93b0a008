"""Corpus construction: synthetic noisy speech for pre-training, WER filtering
and speech-span truncation for real recordings."""

from __future__ import annotations

import dataclasses
import json
import logging
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import Waveform, apply_rir, mix_at_snr
from .errors import BoundsError, ConfigError, UndefinedWERError
from .io import read_wav, write_wav

logger = logging.getLogger(__name__)

DEFAULT_WER_THRESHOLD = 0.2


@dataclass
class ManifestEntry:
    audio_path: str
    transcript: str = ""
    hypothesis_transcript: str | None = None
    speech_span: tuple[float, float] | None = None
    env_caption: str | None = None
    id: str | None = None
    snr_db: float | None = None
    rir_id: str | None = None
    noise_id: str | None = None

    def __post_init__(self):
        if self.speech_span is not None:
            start, end = map(float, self.speech_span)
            if not 0.0 <= start < end:
                raise BoundsError(f"invalid speech span {self.speech_span}")
            self.speech_span = (start, end)

    def to_json(self) -> str:
        d = {k: v for k, v in dataclasses.asdict(self).items() if v is not None}
        if "speech_span" in d:
            d["speech_span"] = list(d["speech_span"])
        return json.dumps(d, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        if kwargs.get("speech_span") is not None:
            kwargs["speech_span"] = tuple(kwargs["speech_span"])
        return cls(**kwargs)


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            entries.append(ManifestEntry.from_dict(json.loads(line)))
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    text = "".join(e.to_json() + "\n" for e in entries)
    Path(path).write_text(text)


def resolve(entry: ManifestEntry, base_dir) -> Path:
    p = Path(entry.audio_path)
    return p if p.is_absolute() or base_dir is None else Path(base_dir) / p


@dataclass(frozen=True)
class SynthesisSpec:
    snr_min_db: float = 2.0
    snr_max_db: float = 10.0
    rir_probability: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.snr_min_db > self.snr_max_db:
            raise ConfigError("snr_min_db must not exceed snr_max_db")
        if not 0.0 <= self.rir_probability <= 1.0:
            raise ConfigError("rir_probability must lie in [0, 1]")


@dataclass
class SynthesisResult:
    entry: ManifestEntry
    waveform: Waveform
    clean: Waveform
    peak_scale: float


def _synthesize_one(i, clean_entry, clean_wav, noise, noise_wavs, rirs, rir_ids, spec):
    # per-entry stream so thread scheduling never changes the draws
    rng = np.random.default_rng([spec.rng_seed, i])
    snr = float(rng.uniform(spec.snr_min_db, spec.snr_max_db))
    k = int(rng.integers(len(noise)))
    use_rir = bool(rirs) and rng.random() < spec.rir_probability
    r = int(rng.integers(len(rirs))) if use_rir else None

    speech = apply_rir(clean_wav, rirs[r]) if use_rir else clean_wav
    mix, info = mix_at_snr(speech, noise_wavs[k], snr, return_info=True)
    stem = clean_entry.id or Path(clean_entry.audio_path).stem
    entry = ManifestEntry(
        audio_path=f"{i:06d}_{stem}.wav",
        transcript=clean_entry.transcript,
        env_caption=noise[k].env_caption,
        id=f"{i:06d}_{stem}",
        snr_db=snr,
        rir_id=rir_ids[r] if use_rir else None,
        noise_id=noise[k].id or Path(noise[k].audio_path).stem,
    )
    return SynthesisResult(entry, mix, speech, info.peak_scale)


def synthesize_corpus(
    clean: Sequence[ManifestEntry],
    noise: Sequence[ManifestEntry],
    rirs: Sequence[Waveform],
    spec: SynthesisSpec = SynthesisSpec(),
    *,
    clean_dir=None,
    noise_dir=None,
    rir_ids: Sequence[str] | None = None,
    out_dir=None,
    workers: int = 1,
    return_audio: bool = False,
):
    """Mix every clean utterance with a random noise clip (optionally reverberated first).

    Draws per entry: SNR ~ U[snr_min, snr_max], a noise clip, and with
    probability ``rir_probability`` an impulse response applied to the clean
    speech before mixing. Failed entries are logged and skipped. When
    ``out_dir`` is set, mixes are written there as WAV files named in the
    returned manifest.
    """
    if not noise:
        raise ConfigError("empty noise pool")
    if not clean:
        raise ConfigError("empty clean manifest")
    rir_ids = list(rir_ids) if rir_ids is not None else [f"rir{j:04d}" for j in range(len(rirs))]
    noise_wavs = [read_wav(resolve(e, noise_dir)) for e in noise]

    def work(i):
        entry = clean[i]
        try:
            clean_wav = read_wav(resolve(entry, clean_dir))
            res = _synthesize_one(i, entry, clean_wav, noise, noise_wavs, rirs, rir_ids, spec)
        except (ValueError, OSError) as exc:
            logger.error("entry %d (%s) failed: %s", i, entry.audio_path, exc)
            return None
        if out_dir is not None:
            write_wav(Path(out_dir) / res.entry.audio_path, res.waveform)
        return res

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, range(len(clean))))
    else:
        results = [work(i) for i in range(len(clean))]
    results = [r for r in results if r is not None]
    if return_audio:
        return results
    return [r.entry for r in results]


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_text(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def word_edits(ref: str, hyp: str) -> tuple[int, int]:
    """(edit count, reference word count) after normalization."""
    r, h = normalize_text(ref), normalize_text(hyp)
    if not r:
        raise UndefinedWERError("reference transcript is empty after normalization")
    return edit_distance(r, h), len(r)


def word_error_rate(ref: str, hyp: str) -> float:
    edits, n = word_edits(ref, hyp)
    return edits / n


def filter_by_wer(entries: Sequence[ManifestEntry], threshold: float = DEFAULT_WER_THRESHOLD):
    """Split entries into (kept, discarded); kept means WER <= threshold.

    ``discarded`` holds ``(entry, reason)`` pairs where reason is either the
    WER value formatted as ``"wer=..."`` or ``"no-hypothesis"``.
    """
    kept, discarded = [], []
    for e in entries:
        if e.hypothesis_transcript is None:
            discarded.append((e, "no-hypothesis"))
            continue
        try:
            wer = word_error_rate(e.transcript, e.hypothesis_transcript)
        except UndefinedWERError:
            discarded.append((e, "empty-reference"))
            continue
        if wer <= threshold:
            kept.append(e)
        else:
            discarded.append((e, f"wer={wer:.6f}"))
    return kept, discarded


def truncate_to_speech(w: Waveform, span: tuple[float, float]) -> Waveform:
    start, end = map(float, span)
    if not (0.0 <= start < end) or end > w.duration + 0.5 / w.sample_rate:
        raise BoundsError(f"span {span} outside clip of {w.duration:.3f} s")
    first = int(round(start * w.sample_rate))
    length = int(round((end - start) * w.sample_rate))
    if first + length > len(w):
        raise BoundsError(f"span {span} runs past the end of the clip")
    return Waveform(w.samples[first : first + length], w.sample_rate)
