"""PSNR / SSIM on the luma channel."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d

from .images import to_y_channel

PSNR_CAP = 100.0


def _prepare(a, b, border):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    ya, yb = to_y_channel(a), to_y_channel(b)
    if border:
        ya = ya[border:-border, border:-border]
        yb = yb[border:-border, border:-border]
    return ya, yb


def psnr_y(a, b, border: int = 4) -> float:
    ya, yb = _prepare(a, b, border)
    mse = np.mean((ya - yb) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(1.0 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_luma(ya: np.ndarray, yb: np.ndarray) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows."""
    c1, c2 = 0.01**2, 0.03**2
    win = gaussian_window()

    def filt(x):
        return correlate2d(x, win, mode="valid")

    mu_a, mu_b = filt(ya), filt(yb)
    var_a = filt(ya * ya) - mu_a**2
    var_b = filt(yb * yb) - mu_b**2
    cov = filt(ya * yb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_y(a, b, border: int = 4) -> float:
    ya, yb = _prepare(a, b, border)
    if np.array_equal(ya, yb):
        return 1.0
    return ssim_luma(ya, yb)


@dataclass
class MetricReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, name: str, psnr: float, ssim: float) -> None:
        self.rows.append((name, float(psnr), float(ssim)))

    @property
    def psnr_y(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def ssim_y(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "psnr_y", "ssim_y"])
            for name, p, s in self.rows:
                w.writerow([name, repr(p), repr(s)])
            w.writerow(["mean", repr(self.psnr_y), repr(self.ssim_y)])

    @classmethod
    def read(cls, path) -> "MetricReport":
        rep = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        for name, p, s in rows:
            if name != "mean":
                rep.add(name, float(p), float(s))
        return rep
