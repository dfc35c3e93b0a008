import pytest
import torch

from dualdit.dit import DitConfig, DualDiT, dit_forward, patchify, unpatchify
from dualdit.diffusion import ConditionPair
from dualdit.errors import ConditioningError, ConfigError


def small(**kw):
    base = dict(num_blocks=2, hidden_dim=64, num_heads=4, patch_size=2, cond_dim=32)
    base.update(kw)
    return DualDiT(DitConfig(**base))


def randomize(model, scale=0.1):
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn_like(p))
    return model


class TestPatchify:
    def test_token_count(self):
        assert patchify(torch.randn(16, 8, 4), 2).shape == (8, 64)

    def test_degenerate_patch(self):
        assert patchify(torch.randn(8, 6, 4), 1).shape == (24, 8)

    @pytest.mark.parametrize("p", [1, 2, 4])
    def test_roundtrip(self, p):
        z = torch.randn(3, 8, 8, 12)
        torch.testing.assert_close(unpatchify(patchify(z, p), 8, 8, 12, p), z, rtol=0, atol=0)

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            patchify(torch.randn(1, 8, 3, 4), 2)


class TestConfig:
    def test_heads_divide_hidden(self):
        with pytest.raises(ConfigError):
            DitConfig(hidden_dim=30, num_heads=4)

    def test_modes(self):
        with pytest.raises(ConfigError):
            DitConfig(text_cond="film")


class TestForward:
    def test_shape(self):
        m = small()
        z = torch.randn(2, 8, 8, 4)
        out = m(z, torch.tensor([3, 40]), torch.randn(2, 32), torch.randn(2, 8, 8, 4))
        assert out.shape == z.shape

    def test_odd_grid_is_padded(self):
        m = randomize(small())
        z = torch.randn(1, 8, 3, 5)
        assert m(z, torch.tensor([1]), torch.randn(1, 32), torch.randn(1, 8, 3, 5)).shape == z.shape

    def test_functional_wrapper(self):
        m = randomize(small())
        z, c, e = torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4), torch.randn(1, 32)
        t = torch.tensor([5])
        torch.testing.assert_close(dit_forward(z, t, ConditionPair(e, c), m), m(z, t, e, c))

    def test_zero_output_at_init(self):
        m = small()
        z = torch.randn(2, 8, 8, 4)
        out = m(z, torch.tensor([3, 40]), torch.randn(2, 32), torch.randn(2, 8, 8, 4))
        assert float(out.detach().norm() / z.norm()) < 0.1

    def test_zero_init_cross_attention_ignores_env_path(self):
        torch.manual_seed(0)
        m = randomize(small())
        for block in m.blocks:
            torch.nn.init.zeros_(block.cross_attn.proj.weight)
            torch.nn.init.zeros_(block.cross_attn.proj.bias)
        z, c = torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4)
        e1, e2 = torch.randn(1, 1, 32), torch.randn(1, 1, 32)
        # same pooled vector, different sequences: only the CA path could tell them apart
        seq1 = torch.cat([e1, e2], 1)
        seq2 = torch.cat([e2, e1], 1)
        t = torch.tensor([7])
        torch.testing.assert_close(m(z, t, seq1, c), m(z, t, seq2, c))
        # the adaLN path still reacts to the environment
        assert not torch.allclose(m(z, t, e1, c), m(z, t, e2, c))

    def test_batch_permutation(self):
        m = randomize(small()).double()
        B = 5
        z, c = torch.randn(B, 8, 4, 4, dtype=torch.float64), torch.randn(B, 8, 4, 4, dtype=torch.float64)
        e, t = torch.randn(B, 32, dtype=torch.float64), torch.randint(1, 50, (B,))
        perm = torch.randperm(B)
        out = m(z, t, e, c)
        torch.testing.assert_close(m(z[perm], t[perm], e[perm], c[perm]), out[perm])

    def test_content_shape_mismatch(self):
        with pytest.raises(ConditioningError):
            small()(torch.randn(1, 8, 4, 4), torch.tensor([1]), None, torch.randn(1, 8, 2, 4))

    def test_env_dim_mismatch(self):
        with pytest.raises(ConditioningError):
            small()(torch.randn(1, 8, 4, 4), torch.tensor([1]), torch.randn(1, 16))

    def test_speaker(self):
        m = randomize(small(speaker_dim=6))
        z = torch.randn(1, 8, 4, 4)
        a = m(z, torch.tensor([3]), speaker=torch.zeros(1, 6))
        b = m(z, torch.tensor([3]), speaker=torch.ones(1, 6))
        assert not torch.allclose(a, b)
        with pytest.raises(ConditioningError):
            small()(z, torch.tensor([3]), speaker=torch.zeros(1, 6))

    @pytest.mark.parametrize("text_cond,env_cond", [("cat", "adaln"), ("ca", "adaln"), ("cat", "adaln+ca")])
    def test_ablation_variants(self, text_cond, env_cond):
        m = randomize(small(text_cond=text_cond, env_cond=env_cond))
        z = torch.randn(2, 8, 4, 4)
        c1, c2 = torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4)
        t, e = torch.tensor([1, 2]), torch.randn(2, 32)
        out = m(z, t, e, c1)
        assert out.shape == z.shape
        assert not torch.allclose(out, m(z, t, e, c2))


class TestNulls:
    def test_repeatable_and_shaped(self):
        m = small()
        a, b = m.null_conditions((8, 6, 2)), m.null_conditions((8, 6, 2))
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        assert a[1].shape == (8, 6, 2)

    def test_drop_masks_substitute_nulls(self):
        m = randomize(small())
        z, c, e = torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4), torch.randn(2, 32)
        t = torch.tensor([4, 4])
        dropped = m(z, t, e, c, drop_env=torch.tensor([True, True]), drop_cont=torch.tensor([True, True]))
        torch.testing.assert_close(dropped, m(z, t))

    def test_gradient_reaches_nulls(self):
        m = randomize(small())
        z, c, e = torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4), torch.randn(2, 32)
        out = m(z, torch.tensor([3, 9]), e, c, drop_env=torch.tensor([True, False]), drop_cont=torch.tensor([False, True]))
        out.pow(2).sum().backward()
        assert m.null_env.grad.abs().sum() > 0 and m.null_cont.grad.abs().sum() > 0

    def test_no_gradient_when_not_dropped(self):
        m = randomize(small())
        z, c, e = torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4), torch.randn(2, 32)
        m(z, torch.tensor([3, 9]), e, c).pow(2).sum().backward()
        assert m.null_env.grad is None or m.null_env.grad.abs().sum() == 0
