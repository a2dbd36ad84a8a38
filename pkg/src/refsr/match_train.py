"""Teacher (HR-HR) and student (LR-HR) correspondence training."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import correspondence, geometry, images
from .checkpoint import save_checkpoint
from .descriptor import ContrastiveMatcher, student_forward
from .matchloss import correlation_volume, kl_distill_loss, margin_terms, total_matcher_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    margin: float = 1.0
    threshold: float = 4.0  # descriptor-grid cells, Chebyshev
    temperature: float = 0.15
    alpha_kl: float = 15.0
    matcher_lr: float = 1e-3
    batch_size: int = 8
    lr_patch: int = 40
    ref_patch: int = 160
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    round_targets: bool = False

    def __post_init__(self):
        if self.margin <= 0 or self.threshold < 0 or self.temperature <= 0 or self.alpha_kl < 0:
            raise ValueError("need margin > 0, threshold >= 0, temperature > 0, alpha_kl >= 0")


@dataclass
class MatcherSample:
    hr: torch.Tensor  # (3, S, S)
    lr_up: torch.Tensor  # (3, S, S) bicubic-upsampled LR of hr
    ref: torch.Tensor  # (3, S, S) warped hr
    targets: torch.Tensor  # (S/4, S/4, 2)
    valid: torch.Tensor  # (S/4, S/4)
    homography: geometry.Homography | None = None


@dataclass
class LossReport:
    l_margin: float
    l_kl: float
    total: float
    active: int


class TrainingAborted(RuntimeError):
    def __init__(self, message, model, iteration):
        super().__init__(message)
        self.model = model
        self.iteration = iteration


def make_sample(hr: np.ndarray, ref: np.ndarray, hom: geometry.Homography) -> MatcherSample:
    hr = images.crop_to_multiple(hr)
    ref = images.crop_to_multiple(ref)
    lr_up = images.upsample(images.degrade(hr))
    gt = geometry.build_ground_truth(hom, (hr.shape[0] // 4, hr.shape[1] // 4),
                                     (ref.shape[0] // 4, ref.shape[1] // 4))
    return MatcherSample(images.to_tensor(hr)[0], images.to_tensor(lr_up)[0],
                         images.to_tensor(ref)[0],
                         torch.as_tensor(gt.target_positions, dtype=torch.float32),
                         torch.as_tensor(gt.validity_mask), hom)


def synthesize_pair(hr: np.ndarray, seed: int, group: str = "train"):
    """Warp ``hr`` under a random homography from ``group``'s band."""
    rng = np.random.default_rng(seed)
    spec = geometry.sample_transform_spec(group, rng, min(hr.shape[:2]))
    hom = geometry.sample_homography(spec, int(rng.integers(2**31)), hr.shape[:2])
    return geometry.warp_image(hr, hom, hr.shape[:2]), hom


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = np.array([], dtype=np.int64)
    bs = min(batch_size, n)
    while True:
        if len(order) < bs:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:bs]
        order = order[bs:]


def _stack(samples, idx, attr):
    return torch.stack([getattr(samples[i], attr) for i in idx])


def _write_curve(path: Path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "l_margin", "l_kl", "total"])
        w.writerows(curve)


def _train(model, samples, config, iters, seed, stage, step_fn, out_dir=None,
           checkpoint_every=0, config_hash=""):
    if not samples:
        raise ValueError("no training samples")
    opt = torch.optim.Adam(model.parameters(), lr=config.matcher_lr,
                           betas=(config.adam_beta1, config.adam_beta2),
                           weight_decay=config.weight_decay)
    rng = np.random.default_rng(seed)
    batches = _batches(len(samples), config.batch_size, rng)
    last_good = copy.deepcopy(model.state_dict())
    curve = []
    out_dir = Path(out_dir) if out_dir else None
    for it in range(1, iters + 1):
        idx = next(batches)
        report, loss = step_fn(samples, idx)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise TrainingAborted(f"{stage}: non-finite loss at iteration {it}", model, it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append((it, report.l_margin, report.l_kl, report.total))
        if checkpoint_every and it % checkpoint_every == 0:
            last_good = copy.deepcopy(model.state_dict())
            if out_dir:
                save_checkpoint(out_dir / f"{stage}_{it}.ckpt", {stage: model}, stage, it, config_hash)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / f"{stage}_final.ckpt", {stage: model}, stage, iters, config_hash)
        _write_curve(out_dir / f"{stage}_loss.csv", curve)
    return curve


def teacher_step(teacher, config):
    def step(samples, idx):
        f_a, f_b = teacher(_stack(samples, idx, "hr"), _stack(samples, idx, "ref"))
        terms = margin_terms(f_a, f_b, _stack(samples, idx, "targets"), _stack(samples, idx, "valid"),
                             config.margin, config.threshold, config.round_targets)
        loss = terms.mean()
        return LossReport(loss.item(), 0.0, loss.item(), int((terms > 0).sum())), loss
    return step


def student_step(student, teacher, config):
    def step(samples, idx):
        ref = _stack(samples, idx, "ref")
        valid = _stack(samples, idx, "valid")
        f_in, f_ref = student_forward(student, _stack(samples, idx, "lr_up"), ref)
        terms = margin_terms(f_in, f_ref, _stack(samples, idx, "targets"), valid,
                             config.margin, config.threshold, config.round_targets)
        l_margin = terms.mean()
        l_kl = torch.zeros(())
        if config.alpha_kl > 0:
            with torch.no_grad():
                t_in, t_ref = teacher(_stack(samples, idx, "hr"), ref)
            if t_in.shape != f_in.shape or t_ref.shape != f_ref.shape:
                raise ValueError("teacher and student descriptor grids differ")
            cor_t = correlation_volume(t_in, t_ref, config.temperature)
            cor_s = correlation_volume(f_in, f_ref, config.temperature)
            l_kl = kl_distill_loss(cor_t, cor_s, valid)
        loss = total_matcher_loss(l_margin, l_kl, config.alpha_kl)
        return LossReport(l_margin.item(), l_kl.item(), loss.item(), int((terms > 0).sum())), loss
    return step


def train_teacher(samples, config: TrainConfig, seed: int = 0, iters: int = 1000,
                  init: str = "random", weights_path=None, **kwargs):
    """HR-HR matcher trained with the margin loss alone."""
    teacher = ContrastiveMatcher(init, seed, weights_path)
    teacher.train()
    curve = _train(teacher, samples, config, iters, seed, "teacher",
                   teacher_step(teacher, config), **kwargs)
    return teacher, curve


def train_student(samples, teacher: ContrastiveMatcher | None, config: TrainConfig,
                  seed: int = 0, iters: int = 1000, init: str = "random", weights_path=None,
                  **kwargs):
    """LR-HR matcher: margin loss plus distillation from a frozen teacher."""
    if teacher is None and config.alpha_kl > 0:
        raise ValueError("a teacher is required when alpha_kl > 0")
    if teacher is not None:
        teacher.eval()
        teacher.requires_grad_(False)
    student = ContrastiveMatcher(init, seed, weights_path)
    student.train()
    curve = _train(student, samples, config, iters, seed, "student",
                   student_step(student, teacher, config), **kwargs)
    return student, curve


@torch.no_grad()
def mean_aee(matcher: ContrastiveMatcher, samples, use_hr: bool = False) -> float:
    """Mean end-point error (grid cells) of ``matcher`` over ``samples``."""
    errs = []
    for s in samples:
        src = s.hr if use_hr else s.lr_up
        f_in, f_ref = matcher(src[None], s.ref[None])
        cmap = correspondence.match(f_in, f_ref)
        gt = geometry.CorrespondenceGroundTruth(s.targets.numpy().astype(np.float64), s.valid.numpy())
        errs.append(correspondence.aee(cmap, gt))
    return float(np.mean(errs))
