import subprocess
import sys

import numpy as np
import pytest
import torch

from dualdit.diffusion import q_sample
from dualdit.dsp import Waveform
from dualdit.embed import (
    CondEmbedding,
    I2ATranslator,
    TranslatorConfig,
    fit_translator,
    i2a_loss,
    load_translator,
    save_translator,
    toy_audio_embed,
    toy_text_embed,
    translate_image,
)
from dualdit.errors import ConfigError, FormatError, ShapeError
from dualdit.io import save_checkpoint
from tests.helpers import tone, white


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class TestAudioEmbed:
    def test_deterministic_unit_norm(self):
        w = white(0.5, seed=3)
        a, b = toy_audio_embed(w), toy_audio_embed(w)
        assert np.array_equal(a.vector, b.vector)
        assert abs(np.linalg.norm(a.vector) - 1) < 1e-6
        assert a.modality == "audio" and a.dim == 32

    def test_noise_vs_tone(self):
        assert cos(toy_audio_embed(white(0.5)).vector, toy_audio_embed(tone(440, 0.5)).vector) < 0.9

    def test_silence_allowed(self):
        e = toy_audio_embed(Waveform(np.zeros(4000), 16000))
        assert np.all(np.isfinite(e.vector))

    def test_short_clip(self):
        assert toy_audio_embed(tone(300, 0.01), dim=8).dim == 8

    def test_stable_across_processes(self):
        code = ("from dualdit.embed import toy_text_embed;"
                "print(toy_text_embed('rain on tin roof').vector.tobytes().hex())")
        out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
        assert out == toy_text_embed("rain on tin roof").vector.tobytes().hex()


class TestTextEmbed:
    def test_bag_of_words(self):
        a = toy_text_embed("rain on a tin roof")
        b = toy_text_embed("roof tin a on rain")
        assert np.array_equal(a.vector, b.vector)
        assert abs(np.linalg.norm(a.vector) - 1) < 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            toy_text_embed(" ... ")

    def test_disjoint_vocabularies_are_dissimilar(self, rng):
        sims = []
        for k in range(100):
            w1 = [f"alpha{k}x{i}" for i in range(rng.integers(2, 6))]
            w2 = [f"beta{k}y{i}" for i in range(rng.integers(2, 6))]
            sims.append(cos(toy_text_embed(" ".join(w1)).vector, toy_text_embed(" ".join(w2)).vector))
        assert np.mean(sims) < 0.3

    def test_embedding_validation(self):
        with pytest.raises(ValueError):
            CondEmbedding(np.array([np.nan]), "text")
        with pytest.raises(ValueError):
            CondEmbedding(np.ones(3), "video")


class TestTranslator:
    def test_config(self):
        with pytest.raises(ConfigError):
            TranslatorConfig(hidden_dim=30, num_heads=4)
        with pytest.raises(ConfigError):
            TranslatorConfig(norm="l3")

    def test_loss_examples(self):
        m = I2ATranslator(TranslatorConfig(dim=8, hidden_dim=16, num_heads=2))
        z0 = torch.nn.functional.normalize(torch.randn(3, 8), dim=1)
        y, t = torch.randn(3, 8), torch.tensor([1, 5, 9])
        z_t = q_sample(z0, t, torch.randn(3, 8), m.schedule())
        # the output head starts from a zero prediction
        with torch.no_grad():
            m.out.weight.zero_()
            m.out.bias.zero_()
        assert float(i2a_loss(m, z0, y, t, z_t).detach()) == pytest.approx(1.0, rel=1e-6)

    def test_loss_matches_norm_oracle(self):
        m = I2ATranslator(TranslatorConfig(dim=8, hidden_dim=16, num_heads=2)).double()
        z0, y = torch.randn(4, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)
        t = torch.tensor([2, 3, 4, 5])
        z_t = torch.randn(4, 8, dtype=torch.float64)
        pred = m(t, z_t, y).detach().numpy()
        oracle = np.mean([np.sqrt(np.sum((a - b) ** 2)) for a, b in zip(z0.numpy(), pred)])
        assert float(i2a_loss(m, z0, y, t, z_t).detach()) == pytest.approx(oracle, rel=1e-12)
        l1 = np.mean(np.abs(z0.numpy() - pred).sum(1))
        assert float(i2a_loss(m, z0, y, t, z_t, norm="l1").detach()) == pytest.approx(l1, rel=1e-12)

    def test_oracle_network_zero_loss(self):
        class Echo(I2ATranslator):
            def forward(self, t, z_t, y):
                return self.target

        m = Echo(TranslatorConfig(dim=4, hidden_dim=8, num_heads=2))
        m.target = torch.randn(2, 4)
        assert float(i2a_loss(m, m.target, torch.zeros(2, 4), torch.tensor([1, 2]), torch.zeros(2, 4))) == 0

    def test_dimension_mismatch(self):
        m = I2ATranslator(TranslatorConfig(dim=8, hidden_dim=16, num_heads=2))
        with pytest.raises(ShapeError):
            translate_image(m, np.zeros(6))
        with pytest.raises(ShapeError):
            i2a_loss(m, torch.zeros(2, 8), torch.zeros(2, 8), torch.tensor([1, 1]), torch.zeros(3, 8))

    def test_single_step_is_one_prediction(self):
        m = I2ATranslator(TranslatorConfig(dim=8, hidden_dim=16, num_heads=2)).eval()
        y = torch.randn(2, 8)
        out = translate_image(m, y, steps=1, generator=torch.Generator().manual_seed(5))
        noise = torch.randn(2, 8, generator=torch.Generator().manual_seed(5))
        with torch.no_grad():
            direct = m(torch.full((2,), m.cfg.T_steps), noise, y)
        torch.testing.assert_close(out, direct)

    def test_reproducible(self):
        m = I2ATranslator(TranslatorConfig(dim=8, hidden_dim=16, num_heads=2)).eval()
        y = np.ones(8)
        run = lambda: translate_image(m, y, 5, generator=torch.Generator().manual_seed(2))
        assert torch.equal(run(), run())

    def test_loss_moving_average_decreases(self):
        torch.manual_seed(0)
        rng = np.random.default_rng(0)
        y, z = rng.standard_normal((8, 16)), rng.standard_normal((8, 16))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        m = I2ATranslator(TranslatorConfig(dim=16, hidden_dim=32))
        losses = fit_translator(m, y, z, steps=500, lr=1e-3, generator=torch.Generator().manual_seed(0))
        avg = np.convolve(losses, np.ones(20) / 20, mode="valid")[::20]
        assert avg[-1] < 0.5 * avg[0]
        assert np.all(np.diff(avg) < 0.05)

    def test_checkpoint_roundtrip(self, tmp_path):
        m = I2ATranslator(TranslatorConfig(dim=8, hidden_dim=16, num_heads=2, norm="l1")).eval()
        save_translator(tmp_path / "t.ckpt", m)
        back = load_translator(tmp_path / "t.ckpt")
        assert back.cfg == m.cfg
        y = torch.randn(3, 8)
        g = lambda: torch.Generator().manual_seed(0)
        torch.testing.assert_close(translate_image(back, y, 4, g()), translate_image(m, y, 4, g()))

    def test_rejects_other_checkpoints(self, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", {"a": np.zeros(2)}, {"kind": "voice"})
        with pytest.raises(FormatError):
            load_translator(tmp_path / "x.ckpt")
