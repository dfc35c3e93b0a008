"""scikit-learn style wrappers for the components that map arrays to arrays.

The full generator takes text, mels and condition embeddings together, which
does not fit ``fit(X, y)``; it is driven through :class:`~dualdit.pipeline.Trainer`.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .embed import I2ATranslator, TranslatorConfig, fit_translator, translate_image
from .errors import ShapeError
from .latent import MelCodec, fit_codec


def _check_mels(X, mel_bins=None):
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"expected (n, frames, mel_bins) mels, got shape {X.shape}")
    if mel_bins is not None and X.shape[2] != mel_bins:
        raise ShapeError(f"mels have {X.shape[2]} bins, estimator was fit on {mel_bins}")
    return X


class MelCodecEstimator(TransformerMixin, BaseEstimator):
    """Fit the linear mel codec; ``transform`` gives (n, C, N/4, M/4) latents."""

    def __init__(self, latent_channels=8, steps=300, lr=1e-2, pad_value=0.0, random_state=0):
        self.latent_channels = latent_channels
        self.steps = steps
        self.lr = lr
        self.pad_value = pad_value
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _check_mels(X)
        torch.manual_seed(self.random_state)
        self.codec_ = MelCodec(self.latent_channels, pad_value=self.pad_value)
        self.loss_curve_ = fit_codec(self.codec_, torch.as_tensor(X, dtype=torch.float32), self.steps, self.lr)
        self.n_features_in_ = X.shape[2]
        self.n_frames_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "codec_")
        X = _check_mels(X, self.n_features_in_)
        with torch.no_grad():
            z, self.padding_ = self.codec_.encode(torch.as_tensor(X, dtype=torch.float32))
        return z.double().numpy()

    def inverse_transform(self, Z, padding=(0, 0)):
        check_is_fitted(self, "codec_")
        Z = check_array(Z, allow_nd=True, dtype=np.float64)
        with torch.no_grad():
            return self.codec_.decode(torch.as_tensor(Z, dtype=torch.float32), padding).double().numpy()


class ImageToAudioTranslator(BaseEstimator):
    """Diffusion translator from image embeddings ``X`` to audio embeddings ``y``."""

    def __init__(self, hidden_dim=64, num_blocks=2, num_heads=4, T_steps=50, norm="l2",
                 steps=1500, lr=1e-3, sample_steps=25, random_state=0):
        self.hidden_dim = hidden_dim
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.T_steps = T_steps
        self.norm = norm
        self.steps = steps
        self.lr = lr
        self.sample_steps = sample_steps
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if X.shape != y.shape:
            raise ShapeError(f"image and audio embeddings differ in shape: {X.shape} vs {y.shape}")
        torch.manual_seed(self.random_state)
        cfg = TranslatorConfig(X.shape[1], self.hidden_dim, self.num_blocks, self.num_heads, self.T_steps, self.norm)
        self.model_ = I2ATranslator(cfg)
        g = torch.Generator().manual_seed(self.random_state)
        self.loss_curve_ = fit_translator(self.model_, X, y, self.steps, self.lr, generator=g)
        self.model_.eval()
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_}-dim image embeddings, got {X.shape[1]}")
        g = torch.Generator().manual_seed(self.random_state)
        return translate_image(self.model_, X.astype(np.float32), self.sample_steps, generator=g).double().numpy()

    def score(self, X, y):
        """Mean cosine similarity between predictions and ``y``."""
        p = self.predict(X)
        y = check_array(y, dtype=np.float64)
        cos = (p * y).sum(1) / (np.linalg.norm(p, axis=1) * np.linalg.norm(y, axis=1))
        return float(cos.mean())
