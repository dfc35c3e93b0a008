import numpy as np
import pytest
import torch

from dualdit.errors import ShapeError
from dualdit.latent import (
    LatentMapper,
    MelCodec,
    fit_codec,
    latent_map,
    latent_shape,
    pad_to_multiple,
    vae_decode,
    vae_encode,
)
from dualdit.toy import toy_corpus, toy_mel


class TestCodec:
    def test_shape(self):
        z, padding = vae_encode(torch.randn(32, 16), MelCodec())
        assert z.shape == (8, 8, 4) and padding == (0, 0)

    def test_identity_init(self):
        codec = MelCodec().identity_init()
        mel = torch.randn(1, 4, 4)
        z, _ = codec.encode(mel)
        # first 8 depth channels of a 4x4 block are its first two rows
        np.testing.assert_array_equal(z[0, :, 0, 0].detach().numpy(), mel[0, :2].reshape(-1).numpy())

    def test_padding_roundtrip_shape(self):
        codec = MelCodec()
        mel = torch.randn(2, 30, 15)
        z, padding = codec.encode(mel)
        assert z.shape == (2, 8, 8, 4) and padding == (2, 1)
        assert codec.decode(z, padding).shape == mel.shape

    def test_zero_latent_zero_bias(self):
        codec = MelCodec()
        torch.nn.init.zeros_(codec.dec.bias)
        assert torch.all(vae_decode(torch.zeros(8, 2, 2), codec) == 0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            MelCodec().decode(torch.zeros(1, 4, 2, 2))

    def test_exact_linearity(self):
        codec = MelCodec().double()
        a, b = torch.randn(1, 8, 8, dtype=torch.float64), torch.randn(1, 8, 8, dtype=torch.float64)
        enc = lambda m: codec.encode(m)[0]
        zero = torch.zeros_like(a)
        lhs = codec.decode(enc(a) + enc(b) - enc(zero))
        torch.testing.assert_close(lhs, codec.decode(enc(a + b)), atol=1e-10, rtol=0)

    def test_overfit_single_sample(self):
        torch.manual_seed(0)
        mel = torch.randn(1, 8, 8)
        codec = MelCodec()
        fit_codec(codec, mel, steps=200, lr=1e-2)
        with torch.no_grad():
            z, p = codec.encode(mel)
            assert float(((codec.decode(z, p) - mel) ** 2).mean()) < 1e-3

    def test_scale_normalizes_latents(self):
        mels = torch.as_tensor(np.stack([e.mel for e in toy_corpus()]), dtype=torch.float32)
        codec = MelCodec()
        fit_codec(codec, mels, steps=50)
        with torch.no_grad():
            assert float(codec.encode(mels)[0].std()) == pytest.approx(1.0, rel=1e-4)

    def test_held_out_toy_reconstruction(self):
        torch.manual_seed(0)
        train = torch.as_tensor(np.stack([e.mel for e in toy_corpus()]), dtype=torch.float32)
        held = torch.as_tensor(np.stack([toy_mel(t, e)[0] for t, e in [("quiz mob", "rain"), ("fly west", "street")]]),
                               dtype=torch.float32)
        codec = MelCodec(pad_value=0.0)
        fit_codec(codec, train, steps=300)
        with torch.no_grad():
            z, p = codec.encode(held)
            assert float(((codec.decode(z, p) - held) ** 2).mean()) < 0.05


class TestMapper:
    def test_shape(self):
        assert latent_map(torch.randn(32, 16), LatentMapper()).shape == (8, 8, 4)

    def test_matches_codec_geometry(self):
        codec, mapper = MelCodec(), LatentMapper()
        for N, M in [(4, 4), (12, 20), (64, 16), (30, 10)]:
            x = torch.randn(1, N, M)
            assert codec.encode(x)[0].shape == mapper(x).shape
            assert mapper(x).shape[1:] == latent_shape(N, M)

    def test_zero_input_zero_bias(self):
        mapper = LatentMapper()
        torch.nn.init.zeros_(mapper.conv1.bias)
        torch.nn.init.zeros_(mapper.conv2.bias)
        assert torch.all(latent_map(torch.zeros(8, 8), mapper) == 0)

    def test_sensitive_to_single_frame(self):
        mapper = LatentMapper()
        x = torch.randn(1, 16, 16)
        y = x.clone()
        y[0, 5] += 1.0
        assert not torch.allclose(mapper(x), mapper(y))

    def test_element_ratio(self):
        for N, M in [(32, 16), (256, 80), (4, 4)]:
            C, H, W = latent_shape(N, M)
            assert C * H * W / (N * M) == 0.5


def test_pad_to_multiple():
    x, padding = pad_to_multiple(torch.zeros(1, 5, 6), value=-3.0)
    assert x.shape == (1, 8, 8) and padding == (3, 2)
    assert torch.all(x[0, 5:] == -3.0)
