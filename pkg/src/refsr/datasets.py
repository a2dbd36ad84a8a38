"""Dataset layouts and training-patch sampling.

Layouts under a root directory::

    train/input/<stem>.png, train/ref/<stem>.png        cufed5_like, split=train
    test/CUFED5/<stem>_0.png, <stem>_1..5.png           cufed5_like, split=test
    wrsr/input/<stem>.png, wrsr/ref/<stem>.png          wrsr_like
    sisr/<stem>.png                                     sisr_selfref (input is its own reference)
"""
from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import images

log = logging.getLogger(__name__)

TAGS = ("cufed5_like", "wrsr_like", "sisr_selfref")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetError(Exception):
    pass


@dataclass
class PairRecord:
    input_hr: Path
    references: list[Path]
    split: str = "test"
    dataset_tag: str = "cufed5_like"


@dataclass
class TrainingPatch:
    lr: np.ndarray
    hr: np.ndarray
    ref: np.ndarray
    origin: tuple[int, int] = field(default=(0, 0))


def _images_in(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _by_stem(paths):
    return {p.stem: p for p in paths}


def _paired(input_dir: Path, ref_dir: Path, split: str, tag: str) -> list[PairRecord]:
    refs = _by_stem(_images_in(ref_dir))
    records, missing = [], []
    for p in _images_in(input_dir):
        if p.stem not in refs:
            missing.append(str(ref_dir / f"{p.stem}.png"))
            continue
        records.append(PairRecord(p, [refs[p.stem]], split, tag))
    if missing:
        raise DatasetError("missing reference(s): " + ", ".join(missing))
    return records


def _cufed5_test(root: Path, require_refs: bool) -> list[PairRecord]:
    test_dir = root / "test" / "CUFED5"
    files = _by_stem(_images_in(test_dir))
    pattern = re.compile(r"^(.*)_0$")
    records, missing = [], []
    for stem in sorted(files):
        m = pattern.match(stem)
        if not m:
            continue
        base = m.group(1)
        refs = []
        for k in range(1, 6):
            ref = files.get(f"{base}_{k}")
            if ref is None:
                missing.append(str(test_dir / f"{base}_{k}.png"))
            else:
                refs.append(ref)
        records.append(PairRecord(files[stem], refs, "test", "cufed5_like"))
    if missing and require_refs:
        raise DatasetError("missing reference(s): " + ", ".join(missing))
    return records


def load_dataset(root, tag: str, split: str = "test", require_refs: bool = True,
                 validate: bool = False) -> list[PairRecord]:
    """Enumerate pair records; sorted by input filename."""
    root = Path(root)
    if tag not in TAGS:
        raise ValueError(f"unknown dataset tag {tag!r}")
    if tag == "cufed5_like":
        if split == "train":
            records = _paired(root / "train" / "input", root / "train" / "ref", "train", tag)
        else:
            records = _cufed5_test(root, require_refs)
    elif tag == "wrsr_like":
        records = _paired(root / "wrsr" / "input", root / "wrsr" / "ref", split, tag)
    else:
        records = [PairRecord(p, [p], split, tag) for p in _images_in(root / "sisr")]
    if validate:
        for rec in records:
            for p in [rec.input_hr, *rec.references]:
                try:
                    with Image.open(p) as im:
                        im.verify()
                except Exception as exc:  # PIL raises a zoo of types
                    raise DatasetError(f"cannot decode {p}: {exc}") from exc
    log.info("loaded %d %s/%s records", len(records), tag, split)
    return records


def sample_training_patch(pair: PairRecord, rng: np.random.Generator, lr_patch: int = 40,
                          scale: int = images.SCALE, cache: dict | None = None):
    """Aligned (lr, hr) crop from the input plus an independent reference crop.

    Returns ``None`` (with a warning) when either image is smaller than the
    HR patch size.
    """
    hr_size = lr_patch * scale

    def load(p):
        if cache is None:
            return images.load_image(p)
        if p not in cache:
            cache[p] = images.load_image(p)
        return cache[p]

    src = load(pair.input_hr)
    ref_src = load(pair.references[0])
    for img, p in ((src, pair.input_hr), (ref_src, pair.references[0])):
        if img.shape[0] < hr_size or img.shape[1] < hr_size:
            warnings.warn(f"skipping undersized image {p} ({img.shape[0]}x{img.shape[1]})")
            return None
    y = int(rng.integers(0, src.shape[0] - hr_size + 1))
    x = int(rng.integers(0, src.shape[1] - hr_size + 1))
    hr = src[y:y + hr_size, x:x + hr_size]
    ry = int(rng.integers(0, ref_src.shape[0] - hr_size + 1))
    rx = int(rng.integers(0, ref_src.shape[1] - hr_size + 1))
    ref = ref_src[ry:ry + hr_size, rx:rx + hr_size]
    return TrainingPatch(images.degrade(hr, scale), hr, ref, (y, x))
