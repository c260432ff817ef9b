import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advsig.core import (
    BinaryCode,
    CoreError,
    ImageTensor,
    RngState,
    code_to_index,
    index_to_code,
    psnr,
    quantize_tensor,
    quantize_to_image,
    sample_code,
    sample_code_batch,
)


def grid_oracle(value: float) -> float:
    """Independent round-half-up onto the 1/255 grid via exact rationals."""
    v = Fraction(min(max(value, 0.0), 1.0))
    scaled = v * 255
    k = int(scaled) if scaled - int(scaled) < Fraction(1, 2) else int(scaled) + 1
    return k / 255


class TestQuantize:
    def test_exact_grid_value_unchanged(self):
        t = torch.tensor([[[[0.2]]]])
        out = quantize_to_image(t)
        assert out.data.item() == torch.tensor(0.2).item()
        assert out.quantized

    def test_clipping(self):
        t = torch.tensor([[[[-0.1, 1.2]]]])
        out = quantize_to_image(t)
        assert out.data.flatten().tolist() == [0.0, 1.0]

    def test_half_rounds_up(self):
        out = quantize_to_image(torch.tensor([[[[0.5]]]]))
        assert out.data.item() == pytest.approx(128 / 255, abs=1e-9)
        assert grid_oracle(0.5) == Fraction(128, 255)

    def test_non_finite_rejected(self):
        with pytest.raises(CoreError, match="non-finite"):
            quantize_tensor(torch.tensor([[[[float("nan")]]]]))
        with pytest.raises(CoreError):
            quantize_tensor(torch.tensor([[[[float("inf")]]]]))

    def test_unknown_grad_mode(self):
        with pytest.raises(CoreError):
            quantize_tensor(torch.zeros(1, 1, 1, 1), grad_mode="soft")

    @given(st.lists(st.floats(min_value=-0.5, max_value=1.5, width=32), min_size=1, max_size=64))
    @settings(max_examples=60, deadline=None)
    def test_idempotent_bit_exact(self, values):
        t = torch.tensor(values, dtype=torch.float32).reshape(1, 1, 1, -1)
        once = quantize_tensor(t)
        twice = quantize_tensor(once)
        assert torch.equal(once, twice)

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0, width=32), min_size=1, max_size=64))
    @settings(max_examples=60, deadline=None)
    def test_perturbation_at_most_half_step(self, values):
        t = torch.tensor(values, dtype=torch.float32).reshape(1, 1, 1, -1)
        out = quantize_tensor(t)
        assert (out - t).abs().max().item() <= 1 / 510 + 1e-7

    @given(st.floats(min_value=0.0, max_value=1.0, width=32))
    @settings(max_examples=100, deadline=None)
    def test_matches_rational_oracle(self, value):
        out = quantize_tensor(torch.full((1, 1, 1, 1), value)).item()
        assert out == pytest.approx(float(grid_oracle(value)), abs=2e-7)

    def test_straight_through_gradient_is_clip_gradient(self):
        t = torch.tensor([[[[-0.5, 0.3, 0.71, 1.4]]]], requires_grad=True)
        out = quantize_tensor(t, grad_mode="straight_through")
        out.sum().backward()
        assert t.grad.flatten().tolist() == [0.0, 1.0, 1.0, 0.0]

    def test_hard_mode_detaches(self):
        t = torch.rand(1, 1, 2, 2, requires_grad=True)
        out = quantize_tensor(t, grad_mode="hard")
        assert not out.requires_grad


class TestImageTensor:
    def test_rejects_out_of_range(self):
        with pytest.raises(CoreError, match="outside"):
            ImageTensor(torch.full((1, 1, 2, 2), 1.5))

    def test_rejects_bad_rank(self):
        with pytest.raises(CoreError):
            ImageTensor(torch.zeros(2, 2))

    def test_rejects_false_quantized_flag(self):
        with pytest.raises(CoreError, match="grid"):
            ImageTensor(torch.full((1, 1, 2, 2), 0.2501), quantized=True)

    def test_empty_batch_allowed(self):
        img = ImageTensor(torch.zeros(0, 3, 4, 4))
        assert img.batch_size == 0

    def test_zero_spatial_dim_rejected(self):
        with pytest.raises(CoreError):
            ImageTensor(torch.zeros(1, 3, 0, 4))

    def test_uint8_round_trip_is_lossless(self):
        img = quantize_to_image(torch.rand(3, 3, 8, 8))
        back = ImageTensor.from_uint8(img.to_uint8())
        assert torch.equal(img.data, back.data)


class TestPsnr:
    def test_identical_capped(self):
        a = quantize_to_image(torch.rand(2, 3, 4, 4))
        assert psnr(a, a) == 99.0

    def test_one_grid_step_everywhere(self):
        a = ImageTensor(torch.zeros(1, 1, 4, 4))
        b = ImageTensor(torch.full((1, 1, 4, 4), 1 / 255))
        expected = 20 * math.log10(255)
        assert psnr(a, b) == pytest.approx(expected, abs=1e-9)

    def test_zeros_vs_ones(self):
        a = ImageTensor(torch.zeros(1, 1, 4, 4))
        b = ImageTensor(torch.ones(1, 1, 4, 4))
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(CoreError, match="mismatch"):
            psnr(ImageTensor(torch.zeros(1, 1, 4, 4)), ImageTensor(torch.zeros(1, 1, 4, 5)))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_symmetric(self, seed):
        gen = torch.Generator().manual_seed(seed)
        a = ImageTensor(torch.rand(1, 1, 6, 6, generator=gen))
        b = ImageTensor(torch.rand(1, 1, 6, 6, generator=gen))
        assert psnr(a, b) == psnr(b, a)


class TestCodes:
    def test_n1_always_one(self):
        rng = RngState(3).stream("codes")
        for _ in range(50):
            assert sample_code(1, rng).bits == (1,)

    def test_n2_range(self):
        rng = RngState(4).stream("codes")
        seen = {str(sample_code(2, rng)) for _ in range(200)}
        assert seen == {"01", "10", "11"}

    def test_uniformity_30k_draws(self):
        rng = RngState(9).stream("codes")
        codes = sample_code_batch(2, rng, 30000)
        idx = codes[:, 0] * 2 + codes[:, 1]
        counts = np.bincount(idx.long().numpy(), minlength=4)
        assert counts[0] == 0
        freqs = counts[1:] / 30000
        assert np.all(np.abs(freqs - 1 / 3) < 0.02)
        # chi-square against uniform over the 3 usable codes, 99% critical value df=2
        expected = 30000 / 3
        chi2 = float(((counts[1:] - expected) ** 2 / expected).sum())
        assert chi2 < 9.21

    def test_never_all_zero(self):
        for n in (1, 2, 4):
            rng = RngState(n).stream("codes")
            codes = sample_code_batch(n, rng, 100000)
            assert codes.sum(dim=1).min().item() >= 1

    def test_invalid_n(self):
        rng = RngState(0)
        with pytest.raises(CoreError):
            sample_code(0, rng)
        with pytest.raises(CoreError):
            sample_code(99, rng)

    def test_big_endian_convention(self):
        assert code_to_index(BinaryCode((1, 0))) == 2
        assert index_to_code(0, 3).bits == (0, 0, 0)
        assert index_to_code(0, 3).is_zero

    def test_round_trip_exhaustive(self):
        for n in range(1, 9):
            for i in range(2**n):
                assert code_to_index(index_to_code(i, n)) == i

    def test_index_out_of_range(self):
        with pytest.raises(CoreError):
            index_to_code(4, 2)
        with pytest.raises(CoreError):
            index_to_code(-1, 2)

    def test_parse_and_str(self):
        assert str(BinaryCode.parse("0110")) == "0110"
        with pytest.raises(CoreError):
            BinaryCode.parse("0a1")
        with pytest.raises(CoreError):
            BinaryCode(())


class TestRngState:
    def test_same_stream_replays(self):
        a = RngState(42, "x").numpy.normal(size=5)
        b = RngState(42, "x").numpy.normal(size=5)
        assert np.allclose(a, b)

    def test_streams_independent(self):
        a = RngState(42).stream("aug").numpy.normal(size=5)
        b = RngState(42).stream("noise").numpy.normal(size=5)
        assert not np.allclose(a, b)

    def test_torch_generator_deterministic(self):
        a = torch.rand(4, generator=RngState(1, "t").torch)
        b = torch.rand(4, generator=RngState(1, "t").torch)
        assert torch.equal(a, b)

    def test_call_sequence_matters(self):
        rng = RngState(5, "seq")
        first = rng.numpy.normal()
        second = rng.numpy.normal()
        assert first != second
        fresh = rng.fresh()
        assert fresh.numpy.normal() == first
