import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from torchvision.ops import deform_conv2d

from refsr import aggregation as agg
from refsr.sampling import base_grid, bilinear_sample

D = torch.float64


def identity_weight(c):
    w = torch.zeros(c, c, 3, 3, dtype=D)
    w[range(c), range(c), 1, 1] = 1
    return w


def zeros_offsets(b, h, w):
    return torch.zeros(b, 2 * agg.K, h, w, dtype=D)


def ones_mod(b, h, w):
    return torch.ones(b, agg.K, h, w, dtype=D)


def const_p0(b, h, w, dx, dy):
    p0 = torch.zeros(b, 2, h, w, dtype=D)
    p0[:, 0], p0[:, 1] = dx, dy
    return p0


class TestSampler:
    def test_integer_positions_exact(self):
        x = torch.randn(2, 3, 5, 6, dtype=D)
        out = bilinear_sample(x, base_grid(5, 6, dtype=D).expand(2, 5, 6, 2))
        assert torch.equal(out, x)

    def test_midpoint(self):
        x = torch.tensor([[[[0.0, 2.0], [4.0, 6.0]]]], dtype=D)
        assert bilinear_sample(x, torch.tensor([[[0.5, 0.5]]], dtype=D)).item() == 3.0

    def test_zero_padding(self):
        x = torch.ones(1, 1, 3, 3, dtype=D)
        pts = torch.tensor([[[-1.0, 0.0], [-0.5, 0.0], [2.5, 2.0], [10.0, 10.0]]], dtype=D)
        torch.testing.assert_close(bilinear_sample(x, pts)[0, 0], torch.tensor([0, 0.5, 0.5, 0], dtype=D))

    def test_border_padding(self):
        x = torch.arange(9, dtype=D).reshape(1, 1, 3, 3)
        pts = torch.tensor([[[-3.0, 1.0], [5.0, 5.0]]], dtype=D)
        assert bilinear_sample(x, pts, "border")[0, 0].tolist() == [3.0, 8.0]

    def test_matches_grid_sample(self):
        g = torch.Generator().manual_seed(0)
        x = torch.randn(2, 3, 6, 7, generator=g, dtype=D)
        pts = torch.rand(2, 4, 5, 2, generator=g, dtype=D) * torch.tensor([8.0, 7.0], dtype=D) - 1
        norm = torch.stack([(pts[..., 0] + 0.5) / 7 * 2 - 1, (pts[..., 1] + 0.5) / 6 * 2 - 1], -1)
        want = F.grid_sample(x, norm, mode="bilinear", padding_mode="zeros", align_corners=False)
        torch.testing.assert_close(bilinear_sample(x, pts), want, atol=1e-12, rtol=0)

    def test_gradcheck(self):
        g = torch.Generator().manual_seed(1)
        x = torch.randn(1, 2, 5, 5, generator=g, dtype=D, requires_grad=True)
        # keep away from integer kinks
        pts = (torch.randint(0, 4, (1, 6, 2), generator=g).to(D) + 0.2
               + 0.6 * torch.rand(1, 6, 2, generator=g, dtype=D)).requires_grad_(True)
        assert torch.autograd.gradcheck(bilinear_sample, (x, pts), eps=1e-6, atol=1e-6, rtol=1e-3)

    def test_bad_padding(self):
        with pytest.raises(ValueError):
            bilinear_sample(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2), "reflect")


class TestDeformable:
    def test_identity_kernel(self):
        x = torch.randn(1, 4, 6, 6, dtype=D)
        y = agg.modulated_deform_sample(x, const_p0(1, 6, 6, 0, 0), zeros_offsets(1, 6, 6),
                                        ones_mod(1, 6, 6), identity_weight(4))
        assert torch.equal(y, x)

    @pytest.mark.parametrize("dx,dy", [(2, 0), (-1, 3), (0, -2)])
    def test_identity_kernel_integer_p0(self, dx, dy):
        x = torch.randn(1, 3, 8, 8, dtype=D)
        y = agg.modulated_deform_sample(x, const_p0(1, 8, 8, dx, dy), zeros_offsets(1, 8, 8),
                                        ones_mod(1, 8, 8), identity_weight(3))
        shifted = torch.zeros_like(x)
        ys, xs = slice(max(0, -dy), 8 - max(0, dy)), slice(max(0, -dx), 8 - max(0, dx))
        shifted[..., ys, xs] = x[..., max(0, dy):8 + min(0, dy), max(0, dx):8 + min(0, dx)]
        assert torch.equal(y, shifted)

    @pytest.mark.parametrize("dx,dy", [(2, 0), (-1, 2)])
    def test_shift_then_convolve(self, dx, dy):
        g = torch.Generator().manual_seed(2)
        x = torch.randn(1, 3, 9, 9, generator=g, dtype=D)
        w = torch.randn(4, 3, 3, 3, generator=g, dtype=D)
        pad = 6
        xp = F.pad(x, (pad, pad, pad, pad))
        conv = F.conv2d(xp, w, padding=1)
        want = conv[..., pad + dy:pad + dy + 9, pad + dx:pad + dx + 9]
        y = agg.modulated_deform_sample(x, const_p0(1, 9, 9, dx, dy), zeros_offsets(1, 9, 9),
                                        ones_mod(1, 9, 9), w)
        torch.testing.assert_close(y, want, atol=1e-5, rtol=0)

    def test_matches_torchvision(self):
        g = torch.Generator().manual_seed(3)
        x = torch.randn(2, 3, 7, 8, generator=g, dtype=D)
        w = torch.randn(5, 3, 3, 3, generator=g, dtype=D)
        p0 = torch.randint(-3, 4, (2, 2, 7, 8), generator=g).to(D)
        off = torch.randn(2, 2 * agg.K, 7, 8, generator=g, dtype=D) * 1.5
        mod = torch.rand(2, agg.K, 7, 8, generator=g, dtype=D)
        ours = agg.modulated_deform_sample(x, p0, off, mod, w)
        # torchvision wants per-tap (dy, dx) relative to the regular tap grid
        tv_off = torch.stack([off[:, 1::2] + p0[:, 1:2], off[:, 0::2] + p0[:, 0:1]], 2).reshape(2, -1, 7, 8)
        theirs = deform_conv2d(x, tv_off, w, padding=1, mask=mod)
        torch.testing.assert_close(ours, theirs, atol=1e-10, rtol=0)

    @settings(max_examples=20, deadline=None)
    @given(s=st.floats(0.01, 1.0), seed=st.integers(0, 2**31))
    def test_modulation_linearity(self, s, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(1, 2, 5, 5, generator=g, dtype=D)
        w = torch.randn(2, 2, 3, 3, generator=g, dtype=D)
        p0 = torch.randint(-2, 3, (1, 2, 5, 5), generator=g).to(D)
        off = torch.randn(1, 18, 5, 5, generator=g, dtype=D)
        mod = torch.rand(1, 9, 5, 5, generator=g, dtype=D)
        y = agg.modulated_deform_sample(x, p0, off, mod, w)
        torch.testing.assert_close(agg.modulated_deform_sample(x, p0, off, s * mod, w), s * y,
                                   atol=1e-12, rtol=1e-10)

    def test_non_finite_offsets(self):
        off = zeros_offsets(1, 3, 3)
        off[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite offsets"):
            agg.modulated_deform_sample(torch.zeros(1, 1, 3, 3, dtype=D), const_p0(1, 3, 3, 0, 0),
                                        off, ones_mod(1, 3, 3), identity_weight(1))

    def test_output_finite_far_out_of_range(self):
        y = agg.modulated_deform_sample(torch.randn(1, 2, 4, 4, dtype=D), const_p0(1, 4, 4, 100, -50),
                                        zeros_offsets(1, 4, 4), ones_mod(1, 4, 4), identity_weight(2))
        assert torch.equal(y, torch.zeros_like(y))

    def test_gradcheck(self):
        g = torch.Generator().manual_seed(4)
        x = torch.randn(1, 2, 5, 5, generator=g, dtype=D, requires_grad=True)
        w = torch.randn(2, 2, 3, 3, generator=g, dtype=D, requires_grad=True)
        p0 = torch.randint(-1, 2, (1, 2, 5, 5), generator=g).to(D)
        # fractional offsets away from integer kinks
        off = (0.2 + 0.6 * torch.rand(1, 18, 5, 5, generator=g, dtype=D)).requires_grad_(True)
        mod = torch.rand(1, 9, 5, 5, generator=g, dtype=D, requires_grad=True)
        assert torch.autograd.gradcheck(lambda a, b, c, d: agg.modulated_deform_sample(a, p0, b, c, d),
                                        (x, off, mod, w), eps=1e-6, atol=1e-6, rtol=1e-3)


class TestDynamicAggregation:
    def test_initial_state_is_half_convolution(self):
        torch.manual_seed(0)
        layer = agg.DynamicAggregation(4, hidden=8).double()
        x = torch.randn(1, 4, 6, 6, dtype=D)
        feat = torch.randn(1, 4, 6, 6, dtype=D)
        p0 = const_p0(1, 6, 6, 1, 0)
        off, mod = layer.offsets_and_modulation(x, p0, feat)
        assert torch.equal(off, torch.zeros_like(off))
        torch.testing.assert_close(mod, torch.full_like(mod, 0.5))
        want = 0.5 * agg.modulated_deform_sample(x, p0, zeros_offsets(1, 6, 6), ones_mod(1, 6, 6),
                                                 layer.weight)
        torch.testing.assert_close(layer(x, p0, feat), want)

    def test_offsets_clamped(self):
        layer = agg.DynamicAggregation(2, hidden=4, max_offset=3.0).double()
        with torch.no_grad():
            layer.head[2].bias.fill_(100.0)
        x = torch.randn(1, 2, 4, 4, dtype=D)
        off, _ = layer.offsets_and_modulation(x, const_p0(1, 4, 4, 0, 0), x)
        assert off.max().item() == 3.0

    def test_alignment_error(self):
        layer = agg.DynamicAggregation(2, hidden=4)
        with pytest.raises(ValueError, match="not aligned"):
            layer(torch.randn(1, 2, 4, 4), torch.zeros(1, 2, 4, 4), torch.randn(1, 2, 5, 5))

    def test_gradcheck_through_head(self):
        torch.manual_seed(5)
        layer = agg.DynamicAggregation(2, hidden=4).double()
        with torch.no_grad():
            layer.head[2].weight.normal_(0, 0.1)
            layer.head[2].bias.uniform_(0.2, 0.8)
        g = torch.Generator().manual_seed(6)
        x = torch.randn(1, 2, 5, 5, generator=g, dtype=D, requires_grad=True)
        feat = torch.randn(1, 2, 5, 5, generator=g, dtype=D, requires_grad=True)
        p0 = const_p0(1, 5, 5, 1, 0)
        assert torch.autograd.gradcheck(lambda a, b: layer(a, p0, b), (x, feat),
                                        eps=1e-6, atol=1e-5, rtol=1e-3)
        params = list(layer.parameters())

        def by_params(*ps):
            return torch.func.functional_call(layer, dict(zip([n for n, _ in layer.named_parameters()], ps)),
                                              (x.detach(), p0, feat.detach()))
        assert torch.autograd.gradcheck(by_params, tuple(p.detach().requires_grad_(True) for p in params),
                                        eps=1e-6, atol=1e-5, rtol=1e-3)


class TestOffsetsAndPyramid:
    def test_ratio_one_unchanged(self):
        p0 = torch.randn(1, 2, 3, 3)
        assert agg.scale_offsets(p0, 1) is p0

    def test_constant_scaled(self):
        p0 = const_p0(1, 5, 5, 2, 3)
        out = agg.scale_offsets(p0, 4)
        assert out.shape == (1, 2, 20, 20)
        assert (out[:, 0] == 8).all() and (out[:, 1] == 12).all()

    @pytest.mark.parametrize("ratio", [2, 4])
    def test_ramp_round_trip(self, ratio):
        ys, xs = torch.meshgrid(torch.arange(8, dtype=D), torch.arange(8, dtype=D), indexing="ij")
        p0 = torch.stack([0.5 * xs - 1, 0.25 * ys + 0.3 * xs])[None]
        up = agg.scale_offsets(p0, ratio)
        back = F.avg_pool2d(up, ratio) / ratio
        torch.testing.assert_close(back[..., 1:-1, 1:-1], p0[..., 1:-1, 1:-1], atol=1e-5, rtol=0)

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            agg.scale_offsets(torch.zeros(1, 2, 2, 2), 3)

    def test_pyramid_shapes(self, perceptual):
        with torch.no_grad():
            pyr = agg.build_reference_pyramid(perceptual, torch.rand(1, 3, 160, 160))
        assert [tuple(t.shape[1:]) for t in pyr.levels()] == [(256, 40, 40), (128, 80, 80), (64, 160, 160)]

    def test_pyramid_determinism_and_constant(self, perceptual):
        x = torch.full((1, 3, 64, 64), 0.3)
        with torch.no_grad():
            a, b = agg.build_reference_pyramid(perceptual, x), agg.build_reference_pyramid(perceptual, x)
        for ta, tb in zip(a.levels(), b.levels()):
            assert torch.equal(ta, tb)
        inner = a.relu1_1[0, :, 2:-2, 2:-2].reshape(64, -1)
        torch.testing.assert_close(inner, inner[:, :1].expand_as(inner), atol=1e-6, rtol=0)

    def test_aggregator_output_shapes(self, perceptual):
        torch.manual_seed(0)
        net = agg.ReferenceAggregator(hidden=8)
        with torch.no_grad():
            pin = agg.build_reference_pyramid(perceptual, torch.rand(1, 3, 32, 32))
            pref = agg.build_reference_pyramid(perceptual, torch.rand(1, 3, 32, 32))
            out = net(pin, pref, torch.zeros(1, 2, 8, 8))
        assert [tuple(t.shape[1:]) for t in out] == [(256, 8, 8), (128, 16, 16), (64, 32, 32)]
