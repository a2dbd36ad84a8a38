"""Inference-time matching, offset fields and end-point error."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import CorrespondenceGroundTruth
from .matchloss import NORM_EPS

OFFSET_MAGIC = b"C2OF"
OFFSET_VERSION = 1
_HEADER = struct.Struct("<4sBII")


@dataclass
class CorrespondenceMap:
    matched_positions: np.ndarray  # (H', W', 2) int (x, y) in the reference grid
    scores: np.ndarray  # (H', W') similarity of the winning pair

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.scores.shape


@dataclass
class OffsetField:
    p0: np.ndarray  # (H', W', 2) float (dx, dy), reference-grid cells


def match_indices(field_in: torch.Tensor, field_ref: torch.Tensor, tile_size: int = 1024,
                  normalize: bool = True):
    """Best reference cell for every input cell.

    ``field_in`` (B, C, H, W), ``field_ref`` (B, C, Hr, Wr). Returns flat
    row-major reference indices (B, H*W) and winning scores. Ties go to the
    smallest index. Scores are computed in float64, so tiling only moves
    them at the 1e-16 level.
    """
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    b, c = field_in.shape[:2]
    a = field_in.detach().double().reshape(b, c, -1).transpose(1, 2)
    r = field_ref.detach().double().reshape(b, c, -1)
    if normalize:
        a = a / (a.norm(dim=-1, keepdim=True) + NORM_EPS)
        r = r / (r.norm(dim=1, keepdim=True) + NORM_EPS)
    idx, best = [], []
    for start in range(0, a.shape[1], tile_size):
        sim = a[:, start:start + tile_size] @ r
        top = sim.amax(-1, keepdim=True)
        # first index attaining the maximum
        first = (sim == top).to(torch.uint8).argmax(-1)
        idx.append(first)
        best.append(top[..., 0])
    return torch.cat(idx, 1), torch.cat(best, 1)


def match(field_in: torch.Tensor, field_ref: torch.Tensor, tile_size: int = 1024,
          normalize: bool = True) -> CorrespondenceMap:
    """Correspondence map for a single pair of (C, H, W) or (1, C, H, W) fields."""
    if field_in.dim() == 3:
        field_in, field_ref = field_in[None], field_ref[None]
    h, w = field_in.shape[-2:]
    wr = field_ref.shape[-1]
    idx, score = match_indices(field_in, field_ref, tile_size, normalize)
    idx = idx[0].cpu().numpy().reshape(h, w)
    pos = np.stack([idx % wr, idx // wr], axis=-1).astype(np.int64)
    return CorrespondenceMap(pos, score[0].cpu().numpy().reshape(h, w))


def offsets_from_indices(idx: torch.Tensor, grid: tuple[int, int], ref_width: int) -> torch.Tensor:
    """Flat matched indices (B, H*W) -> offsets (B, 2, H, W) as (dx, dy)."""
    h, w = grid
    mx = (idx % ref_width).reshape(-1, h, w)
    my = (idx // ref_width).reshape(-1, h, w)
    ys, xs = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    return torch.stack([mx - xs, my - ys], dim=1).float()


def to_offsets(cmap: CorrespondenceMap) -> OffsetField:
    h, w = cmap.grid_shape
    ys, xs = np.mgrid[0:h, 0:w]
    return OffsetField((cmap.matched_positions - np.stack([xs, ys], axis=-1)).astype(np.float64))


def aee(predicted: CorrespondenceMap, gt: CorrespondenceGroundTruth) -> float:
    """Mean euclidean distance to the ground-truth targets over valid cells."""
    if predicted.grid_shape != gt.grid_shape:
        raise ValueError("grid mismatch between prediction and ground truth")
    mask = gt.validity_mask
    if not mask.any():
        raise ValueError("no valid ground-truth cells")
    diff = predicted.matched_positions[mask] - gt.target_positions[mask]
    return float(np.mean(np.hypot(diff[:, 0], diff[:, 1])))


def write_offsets(path, offsets: OffsetField) -> None:
    h, w = offsets.p0.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(OFFSET_MAGIC, OFFSET_VERSION, h, w))
        fh.write(np.ascontiguousarray(offsets.p0, dtype="<f4").tobytes())


def read_offsets(path) -> OffsetField:
    data = Path(path).read_bytes()
    magic, version, h, w = _HEADER.unpack_from(data)
    if magic != OFFSET_MAGIC:
        raise ValueError(f"not an offset file: {path}")
    if version != OFFSET_VERSION:
        raise ValueError(f"unsupported offset file version {version}")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if body.size != h * w * 2:
        raise ValueError("truncated offset file")
    return OffsetField(body.reshape(h, w, 2).astype(np.float64))


def summary(cmap: CorrespondenceMap, gt: CorrespondenceGroundTruth | None = None,
            stride: int = 4, bins: int = 10) -> str:
    lines = []
    if gt is not None:
        err = aee(cmap, gt)
        lines.append(f"aee_cells {err:.6f}")
        lines.append(f"aee_pixels {err * stride:.6f}")
    counts, edges = np.histogram(cmap.scores, bins=bins, range=(-1.0, 1.0))
    lines.append("score_histogram")
    for lo, hi, n in zip(edges[:-1], edges[1:], counts):
        lines.append(f"  [{lo:+.1f}, {hi:+.1f}) {n}")
    return "\n".join(lines) + "\n"
