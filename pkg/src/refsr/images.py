"""Image I/O, bicubic resampling and colour conversion.

Images are float arrays of shape (H, W, 3) with values in [0, 1].
"""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image

SCALE = 4


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path, format="PNG")


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, as a save/load cycle would."""
    return (np.clip(np.rint(image * 255.0), 0, 255) / 255.0).astype(np.float32)


def crop_to_multiple(image: np.ndarray, multiple: int = SCALE) -> np.ndarray:
    h, w = image.shape[:2]
    return image[: h - h % multiple, : w - w % multiple]


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = ((a + 2) * ax3 - (a + 3) * ax2 + 1) * (ax <= 1)
    far = (a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a) * ((ax > 1) & (ax <= 2))
    return near + far


@lru_cache(maxsize=64)
def resize_matrix(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """Dense (out_len, in_len) bicubic interpolation matrix.

    Keys kernel with a = -0.5, half-pixel aligned sampling, symmetric
    boundary reflection. When shrinking with ``antialias`` the kernel is
    stretched by the inverse scale.
    """
    scale = out_len / in_len
    if scale < 1 and antialias:
        width = 4.0 / scale

        def kernel(x):
            return scale * _cubic(scale * x)
    else:
        width = 4.0
        kernel = _cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - idx)
    weights /= weights.sum(axis=1, keepdims=True)
    # reflect out-of-range taps (1-based indices)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    mat = np.zeros((out_len, in_len), dtype=np.float64)
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, src.ravel()), weights.ravel())
    return mat


def resize(image: np.ndarray, out_hw: tuple[int, int], antialias: bool = True) -> np.ndarray:
    """Bicubic resize of an (H, W, C) array."""
    h, w = image.shape[:2]
    my = resize_matrix(h, out_hw[0], antialias)
    mx = resize_matrix(w, out_hw[1], antialias)
    out = np.einsum("ih,hwc,jw->ijc", my, image.astype(np.float64), mx)
    return out.astype(image.dtype, copy=False)


def resize_tensor(x: torch.Tensor, out_hw: tuple[int, int], antialias: bool = True) -> torch.Tensor:
    """Bicubic resize of a (B, C, H, W) tensor, same kernel as :func:`resize`."""
    h, w = x.shape[-2:]
    my = torch.as_tensor(resize_matrix(h, out_hw[0], antialias), dtype=x.dtype, device=x.device)
    mx = torch.as_tensor(resize_matrix(w, out_hw[1], antialias), dtype=x.dtype, device=x.device)
    return torch.einsum("ih,bchw,jw->bcij", my, x, mx)


def degrade(hr: np.ndarray, scale: int = SCALE) -> np.ndarray:
    """Bicubic x``scale`` downsampling (antialiased)."""
    h, w = hr.shape[:2]
    if h < 8 or w < 8:
        raise ValueError(f"image {h}x{w} is smaller than 8x8")
    if h % scale or w % scale:
        raise ValueError(f"image {h}x{w} not divisible by {scale}; crop first")
    return resize(hr, (h // scale, w // scale))


def upsample(lr: np.ndarray, scale: int = SCALE) -> np.ndarray:
    h, w = lr.shape[:2]
    return resize(lr, (h * scale, w * scale))


def to_y_channel(rgb: np.ndarray) -> np.ndarray:
    """Studio-swing BT.601 luma of an RGB image in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError("expected 3 channels")
    return (rgb @ np.array([65.481, 128.553, 24.966]) + 16.0) / 255.0


def to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) array -> (1, 3, H, W) tensor."""
    return torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=dtype)[None]


def to_array(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy()[0].transpose(1, 2, 0)
