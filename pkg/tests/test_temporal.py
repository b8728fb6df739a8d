import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pivot_vcil.core import ContractError, save_tensors
from pivot_vcil.temporal import TemporalEncoder, count_parameters, shape_walk_count


def test_reference_count_without_positional():
    enc = TemporalEncoder(512, depth=3, heads=2, ffn_mult=4, positional=False)
    assert count_parameters(enc) == 9_457_664


def test_positional_adds_exactly_its_table():
    a = TemporalEncoder(16, depth=1, heads=2, positional=False)
    b = TemporalEncoder(16, depth=1, heads=2, positional=True, max_len=12)
    assert count_parameters(b) - count_parameters(a) == 12 * 16


@given(st.sampled_from([4, 8, 12]), st.integers(1, 3), st.sampled_from([1, 2, 4]), st.booleans())
@settings(max_examples=20, deadline=None)
def test_count_matches_hand_shape_walk(width, depth, heads, positional):
    enc = TemporalEncoder(width, depth, heads, ffn_mult=3, positional=positional, max_len=7)
    expected = shape_walk_count(width, depth, 3 * width, positional_len=7 if positional else 0)
    assert count_parameters(enc) == expected


def small(seed=0, positional=False, dtype=torch.float32):
    return TemporalEncoder(8, depth=2, heads=2, positional=positional, max_len=10, seed=seed).to(dtype)


class TestForward:
    def test_identity_layers_return_class_token(self):
        enc = small().zero_residual_branches()
        frames = torch.randn(1, 8)
        assert torch.allclose(enc.forward_class(frames), enc.class_token)

    def test_identity_layers_average_prompts(self):
        enc = small().zero_residual_branches()
        prompts = torch.randn(3, 8)
        assert torch.allclose(enc.forward_prompted(prompts, torch.randn(4, 8)), prompts.mean(0), atol=1e-6)

    def test_prompted_is_mean_of_prompt_outputs(self):
        enc = small(seed=3)
        prompts, frames = torch.randn(3, 8), torch.randn(5, 8)
        full = enc._encode(torch.cat([prompts, frames]))
        assert torch.allclose(enc.forward_prompted(prompts, frames), full[:3].mean(0), atol=1e-6)

    def test_batched_equals_single(self):
        enc = small(seed=1, positional=True)
        frames = torch.randn(4, 5, 8)
        batched = enc.forward_class(frames)
        single = torch.stack([enc.forward_class(f) for f in frames])
        assert torch.allclose(batched, single, atol=1e-6)
        prompts = torch.randn(2, 8)
        pb = enc.forward_prompted(prompts, frames)
        ps = torch.stack([enc.forward_prompted(prompts, f) for f in frames])
        assert torch.allclose(pb, ps, atol=1e-6)

    def test_empty_prompt(self):
        with pytest.raises(ContractError):
            small().forward_prompted(torch.zeros(0, 8), torch.randn(3, 8))

    def test_too_long_for_positional_table(self):
        with pytest.raises(ValueError):
            small(positional=True).forward_class(torch.randn(12, 8))

    def test_wrong_width(self):
        with pytest.raises(ValueError):
            small().forward_class(torch.randn(3, 6))

    def test_positional_breaks_frame_permutation_symmetry(self):
        frames = torch.randn(4, 8)
        perm = frames[[2, 0, 3, 1]]
        plain, pos = small(seed=2), small(seed=2, positional=True)
        with torch.no_grad():
            pos.pos_embed.normal_()
        assert torch.allclose(plain.forward_class(frames), plain.forward_class(perm), atol=1e-5)
        assert not torch.allclose(pos.forward_class(frames), pos.forward_class(perm), atol=1e-5)


class TestInit:
    def test_seeded(self):
        a, b = small(seed=4), small(seed=4)
        assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
        assert not torch.equal(small(seed=5).class_token, a.class_token)

    def test_truncated_normal_bounds(self):
        enc = small(seed=7)
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                assert torch.all(p == 0), name
            elif ".norm" in name:
                assert torch.all(p == 1), name
            else:
                assert float(p.detach().abs().max()) <= 0.04 + 1e-7, name


def test_prompt_gradient_matches_finite_differences():
    enc = small(seed=0, dtype=torch.float64)
    frames = torch.randn(2, 8, dtype=torch.float64)
    prompts = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda p: enc.forward_prompted(p, frames), (prompts,), eps=1e-6, atol=1e-6)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        enc = small(seed=9, positional=True)
        enc.save(tmp_path / "f_tp.pvt")
        back = TemporalEncoder.load(tmp_path / "f_tp.pvt")
        x = torch.randn(3, 8)
        assert torch.equal(enc.forward_class(x), back.forward_class(x))

    def test_shape_mismatch_rejected(self, tmp_path):
        enc = small()
        state = dict(enc.state_dict())
        state["class_token"] = torch.zeros(9)
        save_tensors(tmp_path / "bad.pvt", state, {"config": enc.config()})
        with pytest.raises(ValueError, match="shape mismatch"):
            TemporalEncoder.load(tmp_path / "bad.pvt")
