"""Contrastive correspondence losses and correlation distillation.

Fields are (B, C, H, W) descriptor maps. Ground truth is given as
``targets`` (B, H, W, 2) real (x, y) positions in the reference grid and a
boolean ``valid`` mask (B, H, W); invalid cells never enter a loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .sampling import base_grid, bilinear_sample

NORM_EPS = 1e-8


def _flat(field: torch.Tensor) -> torch.Tensor:
    b, c = field.shape[:2]
    return field.reshape(b, c, -1).transpose(1, 2)  # (B, HW, C)


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise squared euclidean distances (B, N, C) x (B, M, C) -> (B, N, M)."""
    d = (a * a).sum(-1)[..., :, None] + (b * b).sum(-1)[..., None, :] - 2 * a @ b.transpose(1, 2)
    return d.clamp_min(0)


def _check_valid(valid: torch.Tensor) -> None:
    if not bool(valid.any()):
        raise ValueError("empty correspondence set")


def corresponding_descriptors(field_ref: torch.Tensor, targets: torch.Tensor,
                              round_targets: bool = False) -> torch.Tensor:
    """Reference descriptors at the ground-truth targets, (B, C, H, W)."""
    if round_targets:
        targets = torch.round(targets)
    return bilinear_sample(field_ref, targets.to(field_ref.dtype))


def positive_distance(field_in, field_ref, targets, valid, round_targets: bool = False):
    """Squared distance between f_p and f_{p'}; vector over valid cells."""
    _check_valid(valid)
    f_tgt = corresponding_descriptors(field_ref, targets, round_targets)
    d = ((field_in - f_tgt) ** 2).sum(1)  # (B, H, W)
    return d[valid]


def hardest_negative(field_in, field_ref, targets, valid, threshold: float,
                     round_targets: bool = False):
    """Closest non-matching descriptor in either image, per valid cell.

    Candidates are reference cells farther than ``threshold`` (Chebyshev,
    grid cells) from p' compared against f_p, and input cells farther than
    ``threshold`` from p compared against f_{p'}.
    """
    _check_valid(valid)
    b, _, h, w = field_in.shape
    hr, wr = field_ref.shape[-2:]
    if round_targets:
        targets = torch.round(targets)
    f_in = _flat(field_in)
    f_ref = _flat(field_ref)
    f_tgt = _flat(corresponding_descriptors(field_ref, targets))

    pos_in = base_grid(h, w, dtype=targets.dtype, device=targets.device).reshape(-1, 2)
    pos_ref = base_grid(hr, wr, dtype=targets.dtype, device=targets.device).reshape(-1, 2)
    tgt = targets.reshape(b, -1, 2)

    # reference side: ||k - p'||_inf > T
    far_ref = (tgt[:, :, None, :] - pos_ref[None, None]).abs().amax(-1) > threshold
    d_ref = _sq_dists(f_in, f_ref).masked_fill(~far_ref, float("inf"))
    # input side: ||k - p||_inf > T
    far_in = (pos_in[:, None, :] - pos_in[None, :, :]).abs().amax(-1) > threshold
    d_in = _sq_dists(f_tgt, f_in).masked_fill(~far_in[None], float("inf"))

    neg = torch.minimum(d_ref.amin(-1), d_in.amin(-1)).reshape(b, h, w)[valid]
    if torch.isinf(neg).any():
        raise ValueError("no negatives available")
    return neg


def margin_terms(field_in, field_ref, targets, valid, margin: float = 1.0,
                 threshold: float = 4.0, round_targets: bool = False):
    """Per-cell hinge values max(0, m + Pos - Neg) over valid cells."""
    pos = positive_distance(field_in, field_ref, targets, valid, round_targets)
    neg = hardest_negative(field_in, field_ref, targets, valid, threshold, round_targets)
    return F.relu(margin + pos - neg)


def triplet_margin_loss(field_in, field_ref, targets, valid, margin: float = 1.0,
                        threshold: float = 4.0, round_targets: bool = False):
    return margin_terms(field_in, field_ref, targets, valid, margin, threshold,
                        round_targets).mean()


@dataclass
class CorrelationVolume:
    """Row-stochastic (B, N, M) correlation stored as log-probabilities."""

    log_rows: torch.Tensor
    temperature: float
    input_grid: tuple[int, int] | None = None
    ref_grid: tuple[int, int] | None = None

    @property
    def rows(self) -> torch.Tensor:
        return self.log_rows.exp()

    @classmethod
    def from_probabilities(cls, probs: torch.Tensor, temperature: float = float("nan")):
        probs = torch.as_tensor(probs)
        if probs.dim() == 2:
            probs = probs[None]
        return cls(probs.log(), temperature)


def cosine_similarity_matrix(field_in, field_ref) -> torch.Tensor:
    """(B, N, M) cosine similarities of l2-normalised descriptors."""
    a = _flat(field_in)
    b = _flat(field_ref)
    a = a / (a.norm(dim=-1, keepdim=True) + NORM_EPS)
    b = b / (b.norm(dim=-1, keepdim=True) + NORM_EPS)
    return a @ b.transpose(1, 2)


def correlation_volume(field_in, field_ref, temperature: float = 0.15) -> CorrelationVolume:
    if not (torch.isfinite(field_in).all() and torch.isfinite(field_ref).all()):
        raise ValueError("non-finite descriptors")
    logits = cosine_similarity_matrix(field_in, field_ref) / temperature
    return CorrelationVolume(torch.log_softmax(logits, dim=-1), temperature,
                             tuple(field_in.shape[-2:]), tuple(field_ref.shape[-2:]))


def kl_distill_loss(cor_teacher: CorrelationVolume, cor_student: CorrelationVolume,
                    valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over input positions of KL(teacher row || student row).

    The teacher volume is detached. ``valid`` (B, H, W) restricts the rows.
    """
    lt = cor_teacher.log_rows.detach()
    ls = cor_student.log_rows
    if lt.shape != ls.shape:
        raise ValueError(f"volume shape mismatch {tuple(lt.shape)} vs {tuple(ls.shape)}")
    pt = lt.exp()
    div = torch.where(pt > 0, pt * (lt - ls), torch.zeros_like(ls)).sum(-1)  # (B, N)
    if valid is not None:
        _check_valid(valid)
        div = div[valid.reshape(div.shape)]
    return div.mean()


def total_matcher_loss(l_margin, l_kl, alpha_kl: float = 15.0):
    if alpha_kl == 0:
        return l_margin
    return l_margin + alpha_kl * l_kl
