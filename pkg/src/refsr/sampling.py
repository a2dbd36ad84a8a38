"""Differentiable bilinear sampling on feature maps."""
from __future__ import annotations

import torch


def bilinear_sample(x: torch.Tensor, coords: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Sample ``x`` (B, C, H, W) at real-valued ``coords`` (B, ..., 2) = (x, y).

    Coordinates are in cell units of ``x``; integer coordinates hit cells
    exactly. ``padding`` is ``"zeros"`` (out-of-range taps contribute 0) or
    ``"border"`` (coordinates clamped to the map).
    Returns (B, C, ...).
    """
    b, c, h, w = x.shape
    out_shape = coords.shape[1:-1]
    coords = coords.reshape(b, -1, 2)
    px, py = coords[..., 0], coords[..., 1]
    if padding == "border":
        px = px.clamp(0, w - 1)
        py = py.clamp(0, h - 1)
    elif padding != "zeros":
        raise ValueError(f"unknown padding {padding!r}")
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = x.reshape(b, c, h * w)
    out = 0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1))
            vals = torch.gather(flat, 2, idx[:, None, :].expand(b, c, idx.shape[1]))
            weight = (wx * wy * inside.to(x.dtype))[:, None, :]
            out = out + vals * weight
    return out.reshape(b, c, *out_shape)


def base_grid(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(H, W, 2) tensor of (x, y) cell coordinates."""
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype, device=device),
                            torch.arange(w, dtype=dtype, device=device), indexing="ij")
    return torch.stack([xs, ys], dim=-1)
