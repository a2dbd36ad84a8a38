"""Reference-feature aggregation around matched positions.

For every output cell p the aggregated feature is

    y(p) = sum_k w_k . x(p + p0(p) + p_k + dp_k(p)) * m_k(p)

where p0 is the matched displacement, p_k the 3x3 tap grid, and the
per-tap offsets dp_k and modulations m_k come from a small head looking at
the input feature and the p0-warped reference feature.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .sampling import base_grid, bilinear_sample

K = 9
# (dx, dy) of the 3x3 taps, row-major: matches weight[..., ky, kx]
TAPS = [(kx, ky) for ky in (-1, 0, 1) for kx in (-1, 0, 1)]
PYRAMID_LAYERS = ("relu3_1", "relu2_1", "relu1_1")
PYRAMID_RATIOS = (1, 2, 4)
PYRAMID_CHANNELS = (256, 128, 64)


@dataclass
class ReferencePyramid:
    relu3_1: torch.Tensor  # stride 4, 256 ch
    relu2_1: torch.Tensor  # stride 2, 128 ch
    relu1_1: torch.Tensor  # stride 1, 64 ch

    def levels(self):
        return [self.relu3_1, self.relu2_1, self.relu1_1]


def build_reference_pyramid(vgg, reference: torch.Tensor) -> ReferencePyramid:
    feats = vgg(reference)
    return ReferencePyramid(feats["relu3_1"], feats["relu2_1"], feats["relu1_1"])


def scale_offsets(p0: torch.Tensor, ratio: int) -> torch.Tensor:
    """Offsets (B, 2, H, W) -> (B, 2, rH, rW) in units of the finer grid."""
    if ratio not in (1, 2, 4):
        raise ValueError(f"ratio must be 1, 2 or 4, got {ratio}")
    if ratio == 1:
        return p0
    return ratio * F.interpolate(p0, scale_factor=ratio, mode="bilinear", align_corners=False)


def warp_features(x: torch.Tensor, p0: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` at p + p0 for every cell p of the offset grid."""
    grid = base_grid(*p0.shape[-2:], dtype=p0.dtype, device=p0.device)
    return bilinear_sample(x, grid + p0.permute(0, 2, 3, 1))


def modulated_deform_sample(x: torch.Tensor, p0: torch.Tensor, offsets: torch.Tensor,
                            modulation: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Modulated deformable 3x3 convolution pre-shifted by ``p0``.

    x: (B, Cin, Hx, Wx) sampled with zero padding.
    p0: (B, 2, H, W) matched displacement, channels (dx, dy).
    offsets: (B, 2K, H, W) learned tap offsets, channel 2k = dx_k, 2k+1 = dy_k.
    modulation: (B, K, H, W).
    weight: (Cout, Cin, 3, 3).
    """
    if not (torch.isfinite(offsets).all() and torch.isfinite(p0).all()):
        raise ValueError("non-finite offsets")
    b, _, h, w = p0.shape
    base = base_grid(h, w, dtype=x.dtype, device=x.device) + p0.permute(0, 2, 3, 1).to(x.dtype)
    cols = []
    for k, (kx, ky) in enumerate(TAPS):
        d = offsets[:, 2 * k:2 * k + 2].permute(0, 2, 3, 1)
        pos = base + d + torch.tensor([kx, ky], dtype=x.dtype, device=x.device)
        cols.append(bilinear_sample(x, pos) * modulation[:, k:k + 1])
    cols = torch.stack(cols, dim=2)  # (B, Cin, K, H, W)
    return torch.einsum("ocj,bcjhw->bohw", weight.reshape(weight.shape[0], weight.shape[1], K), cols)


class DynamicAggregation(nn.Module):
    """One pyramid level of offset-guided deformable aggregation."""

    def __init__(self, channels: int, hidden: int = 64, max_offset: float = 8.0):
        super().__init__()
        self.max_offset = max_offset
        self.weight = nn.Parameter(torch.empty(channels, channels, 3, 3))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)
        self.head = nn.Sequential(
            nn.Conv2d(2 * channels, hidden, 3, 1, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, 3 * K, 3, 1, 1),
        )
        # start as plain p0-guided convolution: zero offsets, modulation 0.5
        nn.init.zeros_(self.head[2].weight)
        nn.init.zeros_(self.head[2].bias)

    def offsets_and_modulation(self, x, p0, input_feature):
        out = self.head(torch.cat([input_feature, warp_features(x, p0)], dim=1))
        offsets = out[:, :2 * K].clamp(-self.max_offset, self.max_offset)
        return offsets, torch.sigmoid(out[:, 2 * K:])

    def forward(self, x, p0, input_feature):
        if input_feature.shape[-2:] != p0.shape[-2:]:
            raise ValueError("input feature and offsets are not aligned")
        offsets, modulation = self.offsets_and_modulation(x, p0, input_feature)
        return modulated_deform_sample(x, p0, offsets, modulation, self.weight)


class ReferenceAggregator(nn.Module):
    """Three-level aggregation at strides 4, 2 and 1 of the upsampled input."""

    def __init__(self, hidden: int = 64, max_offset: float = 8.0):
        super().__init__()
        self.levels = nn.ModuleList(DynamicAggregation(c, hidden, max_offset)
                                    for c in PYRAMID_CHANNELS)

    def forward(self, input_pyramid: ReferencePyramid, ref_pyramid: ReferencePyramid,
                p0: torch.Tensor):
        """``p0`` is on the stride-4 grid; returns [256 ch, 128 ch, 64 ch] features."""
        out = []
        for agg, ratio, x, feat in zip(self.levels, PYRAMID_RATIOS, ref_pyramid.levels(),
                                       input_pyramid.levels()):
            out.append(agg(x, scale_offsets(p0, ratio), feat))
        return out
