"""Objective metrics: Frechet distance between embedding sets, cosine
alignment score, and corpus-level word error rate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datagen import word_edits
from .errors import ShapeError, UndefinedWERError

logger = logging.getLogger(__name__)

RIDGE = 1e-6


def _sqrtm_psd(a):
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def embedding_stats(x, ridge=RIDGE):
    """Mean and covariance; adds ``ridge`` to the diagonal when n <= dim."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("expected a non-empty (n, dim) array of embeddings")
    mu = x.mean(axis=0)
    if x.shape[0] > 1:
        sigma = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    else:
        sigma = np.zeros((x.shape[1], x.shape[1]))
    if x.shape[0] < x.shape[1] + 1:
        logger.info("only %d samples for dim %d, adding ridge %g", x.shape[0], x.shape[1], ridge)
        sigma = sigma + ridge * np.eye(x.shape[1])
    return mu, sigma


def frechet_from_stats(mu_a, sigma_a, mu_b, sigma_b):
    sa = _sqrtm_psd(sigma_a)
    middle = sa @ sigma_b @ sa
    vals = np.linalg.eigvalsh((middle + middle.T) / 2)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(vals, 0, None))))
    diff = mu_a - mu_b
    d = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2 * tr_sqrt)
    if d < -1e-8:
        logger.warning("Frechet distance %.3g below numerical slack", d)
    return max(d, 0.0)


def frechet_distance(a, b):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    mu_a, sa = embedding_stats(a)
    mu_b, sb = embedding_stats(b)
    if mu_a.shape != mu_b.shape:
        raise ShapeError("embedding sets have different dimensions")
    return frechet_from_stats(mu_a, sa, mu_b, sb)


def clap_score(audio_embeds, text_embeds):
    """Mean pairwise cosine similarity."""
    a = np.atleast_2d(np.asarray(audio_embeds, dtype=np.float64))
    t = np.atleast_2d(np.asarray(text_embeds, dtype=np.float64))
    if a.shape != t.shape:
        raise ShapeError(f"need paired embeddings, got {a.shape} and {t.shape}")
    cos = (a * t).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(t, axis=1))
    return float(cos.mean())


@dataclass
class WerReport:
    per_entry: dict = field(default_factory=dict)
    edits: int = 0
    words: int = 0
    skipped: int = 0

    @property
    def corpus_wer(self) -> float:
        return self.edits / self.words if self.words else 0.0


def wer_report(pairs) -> WerReport:
    """``pairs`` yields (id, reference, hypothesis). Missing hypotheses or
    empty references are skipped and counted."""
    report = WerReport()
    for key, ref, hyp in pairs:
        if ref is None or hyp is None:
            report.skipped += 1
            continue
        try:
            edits, n = word_edits(ref, hyp)
        except UndefinedWERError:
            report.skipped += 1
            continue
        report.per_entry[key] = edits / n
        report.edits += edits
        report.words += n
    if report.skipped:
        logger.warning("skipped %d entries without a reference/hypothesis pair", report.skipped)
    return report
