"""Homographies, image warping and ground-truth correspondences.

Pixel coordinates put the centre of pixel (x, y) at integer (x, y). A grid
with stride ``s`` has cell ``i`` centred on pixel ``i * s + (s - 1) / 2``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

GROUPS = ("none", "small", "medium", "large", "train")

# (scale range, |rotation| range in degrees, jitter as fraction of side)
GROUP_BANDS = {
    "none": ((1.0, 1.0), (0.0, 0.0), 0.0),
    "small": ((0.9, 1.1), (0.0, 10.0), 0.0),
    "medium": ((0.75, 1.33), (10.0, 25.0), 0.0),
    "large": ((0.5, 2.0), (25.0, 45.0), 0.0),
    "train": ((0.75, 1.33), (0.0, 15.0), 0.1),
}

MAX_RESAMPLES = 10


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray
    inverse: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, matrix) -> "Homography":
        m = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
        m = m / m[2, 2]
        if abs(np.linalg.det(m[:2, :2])) < 1e-12:
            raise ValueError("degenerate homography")
        inv = np.linalg.inv(m)
        return cls(m, inv / inv[2, 2])

    @classmethod
    def identity(cls) -> "Homography":
        return cls.from_matrix(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls.from_matrix([[1, 0, dx], [0, 1, dy], [0, 0, 1]])

    def invert(self) -> "Homography":
        return Homography(self.inverse, self.matrix)

    def compose(self, first: "Homography") -> "Homography":
        """The transform applying ``first`` then ``self``."""
        return Homography.from_matrix(self.matrix @ first.matrix)


@dataclass(frozen=True)
class TransformSpec:
    scale_factor: float = 1.0
    rotation_deg: float = 0.0
    perspective_jitter: float = 0.0  # max per-corner displacement, pixels
    group_label: str = "none"

    def __post_init__(self):
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be positive")
        if self.group_label not in GROUPS:
            raise ValueError(f"unknown group {self.group_label!r}")


@dataclass
class CorrespondenceGroundTruth:
    target_positions: np.ndarray  # (H', W', 2) of (x, y) in reference grid units
    validity_mask: np.ndarray  # (H', W') bool

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.validity_mask.shape


def sample_transform_spec(group: str, rng: np.random.Generator, side: int) -> TransformSpec:
    """Draw a scale/rotation from the band of ``group``; sign of rotation is random."""
    (s_lo, s_hi), (r_lo, r_hi), jitter = GROUP_BANDS[group]
    scale = float(rng.uniform(s_lo, s_hi)) if s_hi > s_lo else s_lo
    rot = float(rng.uniform(r_lo, r_hi)) if r_hi > r_lo else r_lo
    if group == "train":
        rot = float(rng.uniform(-r_hi, r_hi))
    elif rng.random() < 0.5:
        rot = -rot
    return TransformSpec(scale, rot, jitter * side, group)


def _solve_projective(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    return np.append(np.linalg.solve(a, b), 1.0).reshape(3, 3)


def _collinear(pts: np.ndarray, tol: float) -> bool:
    for i in range(4):
        p, q, r = (pts[(i + k) % 4] for k in range(3))
        cross = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
        if abs(cross) < tol:
            return True
    return False


def sample_homography(spec: TransformSpec, rng_seed: int, image_shape: tuple[int, int],
                      margin: float = 0.6) -> Homography:
    """Random homography mapping input pixels to reference pixels.

    The four image corners are rotated and scaled about the image centre,
    then displaced by uniform per-corner jitter. Jitter draws whose corners
    leave the frame by more than ``margin`` of a side are re-drawn; after
    ``MAX_RESAMPLES`` failures the jitter is dropped.
    """
    h, w = image_shape
    if h <= 0 or w <= 0:
        raise ValueError("image_shape must be positive")
    rng = np.random.default_rng(rng_seed)
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    centre = np.array([(w - 1) / 2, (h - 1) / 2])
    t = math.radians(spec.rotation_deg)
    rot = spec.scale_factor * np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    base = (src - centre) @ rot.T + centre
    lo = np.array([-margin * w, -margin * h])
    hi = np.array([w - 1 + margin * w, h - 1 + margin * h])
    tol = 1e-6 * w * h

    jitter = spec.perspective_jitter
    for _ in range(MAX_RESAMPLES):
        dst = base + rng.uniform(-jitter, jitter, size=(4, 2)) if jitter > 0 else base
        if _collinear(dst, tol):
            continue
        if jitter == 0 or (np.all(dst >= lo) and np.all(dst <= hi)):
            return Homography.from_matrix(_solve_projective(src, dst))
    if _collinear(base, tol):
        raise ValueError("degenerate homography")
    return Homography.from_matrix(_solve_projective(src, base))


def apply_homography(matrix: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Project (..., 2) pixel points; points sent to w ~ 0 become NaN."""
    pts = np.asarray(pts, dtype=np.float64)
    hom = pts @ matrix[:, :2].T + matrix[:, 2]
    w = hom[..., 2:3]
    bad = np.abs(w) < 1e-12
    out = hom[..., :2] / np.where(bad, 1.0, w)
    return np.where(bad, np.nan, out)


def map_point(h: Homography, p, src_stride: int = 1, dst_stride: int = 1) -> np.ndarray:
    """Map grid point(s) ``p`` (..., 2) through ``h`` between grid strides."""
    for s in (src_stride, dst_stride):
        if s not in (1, 4):
            raise ValueError(f"stride must be 1 or 4, got {s}")
    p = np.asarray(p, dtype=np.float64)
    px = p * src_stride + (src_stride - 1) / 2
    q = apply_homography(h.matrix, px)
    return (q - (dst_stride - 1) / 2) / dst_stride


def build_ground_truth(h: Homography, input_grid: tuple[int, int], ref_grid: tuple[int, int],
                       stride: int = 4) -> CorrespondenceGroundTruth:
    gh, gw = input_grid
    rh, rw = ref_grid
    if min(gh, gw, rh, rw) <= 0:
        raise ValueError("grid shapes must be positive")
    ys, xs = np.mgrid[0:gh, 0:gw]
    pts = np.stack([xs, ys], axis=-1).astype(np.float64)
    tgt = map_point(h, pts, stride, stride)
    with np.errstate(invalid="ignore"):
        valid = (np.isfinite(tgt).all(axis=-1)
                 & (tgt[..., 0] >= 0) & (tgt[..., 0] <= rw - 1)
                 & (tgt[..., 1] >= 0) & (tgt[..., 1] <= rh - 1))
    return CorrespondenceGroundTruth(tgt, valid)


def warp_image(image: np.ndarray, h: Homography, out_shape: tuple[int, int]) -> np.ndarray:
    """Resample ``image`` so that output(h(p)) = image(p).

    Bilinear inverse mapping; samples outside the source replicate the edge.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    src_h, src_w = image.shape[:2]
    oh, ow = out_shape
    ys, xs = np.mgrid[0:oh, 0:ow]
    q = np.stack([xs, ys], axis=-1).astype(np.float64)
    p = apply_homography(h.inverse, q)
    p = np.nan_to_num(p, nan=0.0, posinf=0.0, neginf=0.0)
    x = np.clip(p[..., 0], 0, src_w - 1)
    y = np.clip(p[..., 1], 0, src_h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = x - x0
    fy = y - y0
    if image.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    img = image.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype, copy=False)


# -- transformation-controlled benchmark -------------------------------------

@dataclass
class ManifestRecord:
    input_path: str
    reference_path: str
    homography: Homography
    group: str


def save_manifest(path, records, skipped=()) -> None:
    """Comma-separated: input, reference, 9 row-major floats, group."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for rec in records:
            vals = [format(v, ".17g") for v in rec.homography.matrix.ravel()]
            writer.writerow([rec.input_path, rec.reference_path, *vals, rec.group])
        for p, reason in skipped:
            fh.write(f"# skipped,{p},{reason}\n")


def load_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 12:
                raise ValueError(f"bad manifest row ({len(row)} fields): {row}")
            mat = np.array([float(v) for v in row[2:11]]).reshape(3, 3)
            records.append(ManifestRecord(row[0], row[1], Homography.from_matrix(mat), row[11]))
    return records


def build_transform_controlled_set(dataset_dir, group: str, out_dir, seed: int = 0):
    """Warp each CUFED5-style test input under a homography from ``group``'s band.

    Writes ``<stem>_ref.png`` and ``<stem>_gt.npz`` (descriptor-grid ground
    truth) per input plus ``manifest.csv``; returns the records.
    """
    from . import datasets, images

    if group not in GROUP_BANDS or group == "train":
        raise ValueError(f"unknown transform group {group!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, skipped = [], []
    for i, rec in enumerate(datasets.load_dataset(dataset_dir, "cufed5_like", split="test",
                                                  require_refs=False)):
        try:
            hr = images.crop_to_multiple(images.load_image(rec.input_hr))
        except OSError as exc:
            log.warning("skipping unreadable %s: %s", rec.input_hr, exc)
            skipped.append((rec.input_hr, "unreadable"))
            continue
        h, w = hr.shape[:2]
        rng = np.random.default_rng([seed, i])
        spec = sample_transform_spec(group, rng, min(h, w))
        hom = sample_homography(spec, int(rng.integers(2**31)), (h, w))
        ref = warp_image(hr, hom, (h, w))
        stem = Path(rec.input_hr).stem
        ref_path = out_dir / f"{stem}_ref.png"
        images.save_image(ref_path, ref)
        gt = build_ground_truth(hom, (h // 4, w // 4), (h // 4, w // 4))
        np.savez(out_dir / f"{stem}_gt.npz", target_positions=gt.target_positions,
                 validity_mask=gt.validity_mask, rotation_deg=spec.rotation_deg,
                 scale_factor=spec.scale_factor)
        records.append(ManifestRecord(str(rec.input_hr), str(ref_path), hom, group))
    save_manifest(out_dir / "manifest.csv", records, skipped)
    return records
