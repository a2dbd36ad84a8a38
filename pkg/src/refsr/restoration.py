"""x4 restoration generator, its losses, the critic, and the training loop."""
from __future__ import annotations

import copy
import csv
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import datasets, images
from .aggregation import ReferenceAggregator, build_reference_pyramid
from .checkpoint import save_checkpoint, state_checksum
from .correspondence import match_indices, offsets_from_indices
from .descriptor import ContrastiveMatcher
from .vgg import PerceptualFeatures

log = logging.getLogger(__name__)

MODES = ("rec_only", "full_gan")
LRELU_SLOPE = 0.1


@dataclass
class RestorationConfig:
    lambda_rec: float = 1.0
    lambda_per: float = 1e-4
    lambda_adv: float = 1e-6
    restoration_lr: float = 1e-4
    warmup_iters: int = 10000
    lambda_gp: float = 10.0
    mode: str = "rec_only"
    batch_size: int = 8
    lr_patch: int = 40
    match_tile: int = 1024

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if min(self.lambda_rec, self.lambda_per, self.lambda_adv, self.lambda_gp) < 0:
            raise ValueError("loss weights must be nonnegative")


class ResidualBlock(nn.Module):
    def __init__(self, ch: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.conv2 = nn.Conv2d(ch, ch, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def _blocks(n: int) -> nn.Sequential:
    return nn.Sequential(*[ResidualBlock() for _ in range(n)])


class RestorationNet(nn.Module):
    """LR features fused with aggregated reference features at x1, x2 and x4."""

    FUSE_CHANNELS = (256, 128, 64)

    def __init__(self, n_blocks: int = 16):
        super().__init__()
        self.head = nn.Conv2d(3, 64, 3, 1, 1)
        self.body1 = _blocks(n_blocks)
        self.fuse1 = nn.Conv2d(64 + 256, 64, 3, 1, 1)
        self.body2 = _blocks(n_blocks)
        self.up1 = nn.Conv2d(64, 256, 3, 1, 1)
        self.fuse2 = nn.Conv2d(64 + 128, 64, 3, 1, 1)
        self.body3 = _blocks(n_blocks)
        self.up2 = nn.Conv2d(64, 256, 3, 1, 1)
        self.fuse3 = nn.Conv2d(64 + 64, 64, 3, 1, 1)
        self.body4 = _blocks(n_blocks)
        self.tail1 = nn.Conv2d(64, 32, 3, 1, 1)
        self.tail2 = nn.Conv2d(32, 3, 3, 1, 1)

    def check_shapes(self, lr, aggregated):
        h, w = lr.shape[-2:]
        for level, (feat, ch, r) in enumerate(zip(aggregated, self.FUSE_CHANNELS, (1, 2, 4)), 1):
            want = (ch, h * r, w * r)
            if tuple(feat.shape[1:]) != want:
                raise ValueError(f"aggregated feature level {level}: shape {tuple(feat.shape[1:])}, "
                                 f"expected {want}")

    def forward(self, lr, aggregated):
        self.check_shapes(lr, aggregated)
        f1, f2, f3 = aggregated
        act = lambda t: F.leaky_relu(t, LRELU_SLOPE)  # noqa: E731
        x1 = self.body1(act(self.head(lr)))
        x = x1 + self.body2(act(self.fuse1(torch.cat([x1, f1], 1))))
        x6 = act(F.pixel_shuffle(self.up1(x), 2))
        x = x6 + self.body3(act(self.fuse2(torch.cat([x6, f2], 1))))
        x11 = act(F.pixel_shuffle(self.up2(x), 2))
        x = x11 + self.body4(act(self.fuse3(torch.cat([x11, f3], 1))))
        return self.tail2(act(self.tail1(x)))


def restore(net: RestorationNet, lr: torch.Tensor, aggregated) -> torch.Tensor:
    """Inference forward; output clamped to [0, 1]."""
    with torch.no_grad():
        return net(lr, aggregated).clamp(0, 1)


class Discriminator(nn.Module):
    """Strided conv critic without normalisation layers."""

    def __init__(self):
        super().__init__()
        chans = [(3, 64, 1), (64, 64, 2), (64, 128, 1), (128, 128, 2), (128, 256, 1), (256, 256, 2)]
        layers = []
        for c_in, c_out, s in chans:
            layers += [nn.Conv2d(c_in, c_out, 3, s, 1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.fc1 = nn.Linear(256, 100)
        self.fc2 = nn.Linear(100, 1)

    def forward(self, x):
        f = self.features(x).mean(dim=(2, 3))
        return self.fc2(F.leaky_relu(self.fc1(f), 0.2))[:, 0]


# -- losses -----------------------------------------------------------------

def rec_loss(sr, hr):
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch {tuple(sr.shape)} vs {tuple(hr.shape)}")
    return (sr - hr).abs().mean()


def perceptual_distance(feat_sr, feat_hr):
    """Per-channel Frobenius norms summed and divided by the feature volume."""
    b, c, h, w = feat_hr.shape
    norms = torch.linalg.vector_norm(feat_hr - feat_sr, dim=(2, 3))  # (B, C)
    return (norms.sum(1) / (c * h * w)).mean()


def perceptual_loss(vgg: PerceptualFeatures, sr, hr):
    return perceptual_distance(vgg(sr)["relu5_1"], vgg(hr)["relu5_1"])


def gradient_penalty(disc, sr, hr, generator: torch.Generator | None = None):
    b = hr.shape[0]
    u = torch.rand((b,) + (1,) * (hr.dim() - 1), generator=generator, dtype=hr.dtype)
    mix = (u * sr.detach() + (1 - u) * hr).requires_grad_(True)
    out = disc(mix)
    if out.requires_grad:
        (grad,) = torch.autograd.grad(out.sum(), mix, create_graph=True, allow_unused=True)
    else:
        grad = None
    if grad is None:
        grad = torch.zeros_like(mix)
    norms = grad.reshape(b, -1).norm(dim=1)
    return ((norms - 1) ** 2).mean()


def adversarial_losses(disc, sr, hr, generator: torch.Generator | None = None,
                       lambda_gp: float = 10.0):
    """(generator loss, critic loss) of the gradient-penalised Wasserstein game."""
    g_loss = -disc(sr).mean()
    d_loss = (disc(sr.detach()).mean() - disc(hr).mean()
              + lambda_gp * gradient_penalty(disc, sr, hr, generator))
    return g_loss, d_loss


def weighted_total(cfg: RestorationConfig, l_rec, l_per=None, l_adv=None):
    total = cfg.lambda_rec * l_rec
    if l_per is not None:
        total = total + cfg.lambda_per * l_per
    if l_adv is not None:
        total = total + cfg.lambda_adv * l_adv
    return total


# -- full pipeline ------------------------------------------------------------

class RefSRPipeline(nn.Module):
    """Frozen matcher -> aggregation -> restoration."""

    def __init__(self, matcher: ContrastiveMatcher, vgg: PerceptualFeatures,
                 aggregator: ReferenceAggregator | None = None,
                 restorer: RestorationNet | None = None, match_tile: int = 1024):
        super().__init__()
        self.matcher = matcher
        self.matcher.requires_grad_(False)
        self.matcher.eval()
        self.vgg = vgg
        self.aggregator = aggregator or ReferenceAggregator()
        self.restorer = restorer or RestorationNet()
        self.match_tile = match_tile

    def train(self, mode: bool = True):
        super().train(mode)
        self.matcher.eval()
        self.vgg.eval()
        return self

    @torch.no_grad()
    def correspondences(self, lr_up, ref):
        """Offsets (B, 2, h, w) on the stride-4 grid, as float."""
        f_in, f_ref = self.matcher(lr_up, ref)
        idx, _ = match_indices(f_in, f_ref, self.match_tile)
        return offsets_from_indices(idx, tuple(f_in.shape[-2:]), f_ref.shape[-1]).to(lr_up.dtype)

    def aggregate(self, lr, ref, p0=None):
        h, w = lr.shape[-2:]
        lr_up = images.resize_tensor(lr, (4 * h, 4 * w))
        if p0 is None:
            p0 = self.correspondences(lr_up, ref)
        in_pyr = build_reference_pyramid(self.vgg, lr_up)
        ref_pyr = build_reference_pyramid(self.vgg, ref)
        return self.aggregator(in_pyr, ref_pyr, p0), p0

    def forward(self, lr, ref, p0=None):
        agg, _ = self.aggregate(lr, ref, p0)
        return self.restorer(lr, agg)

    def super_resolve(self, lr, ref):
        with torch.no_grad():
            agg, p0 = self.aggregate(lr, ref)
            return restore(self.restorer, lr, agg), p0


class RestorationAborted(RuntimeError):
    def __init__(self, message, pipeline, iteration):
        super().__init__(message)
        self.pipeline = pipeline
        self.iteration = iteration


def _batch(records, rng, cfg, cache):
    lrs, hrs, refs = [], [], []
    tries = 0
    while len(lrs) < cfg.batch_size:
        tries += 1
        if tries > 100 * cfg.batch_size:
            raise ValueError("no usable training records")
        rec = records[int(rng.integers(len(records)))]
        patch = datasets.sample_training_patch(rec, rng, cfg.lr_patch, cache=cache)
        if patch is None:
            continue
        lrs.append(patch.lr)
        hrs.append(patch.hr)
        refs.append(patch.ref)
    to = lambda xs: torch.cat([images.to_tensor(x) for x in xs])  # noqa: E731
    return to(lrs), to(hrs), to(refs)


def train_restoration(records, matcher: ContrastiveMatcher, vgg_weights, config: RestorationConfig,
                      seed: int = 0, iters: int = 1000, aggregator: ReferenceAggregator | None = None,
                      out_dir=None, checkpoint_every: int = 0, config_hash: str = "",
                      n_blocks: int = 16):
    """Two-phase schedule: reconstruction only up to ``warmup_iters``, then all terms
    when ``mode == "full_gan"``. Returns (pipeline, curve, call counts)."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    pipe = RefSRPipeline(matcher, PerceptualFeatures(vgg_weights), aggregator,
                         RestorationNet(n_blocks), config.match_tile)
    trainable = list(pipe.aggregator.parameters()) + list(pipe.restorer.parameters())
    opt_g = torch.optim.Adam(trainable, lr=config.restoration_lr)
    gan = config.mode == "full_gan"
    disc = per_net = opt_d = None
    if gan:
        disc = Discriminator()
        opt_d = torch.optim.Adam(disc.parameters(), lr=config.restoration_lr)
        per_net = PerceptualFeatures(vgg_weights, outputs=("relu5_1",))
    calls = Counter()
    curve = []
    cache: dict = {}
    last_good = copy.deepcopy(pipe.state_dict())
    out_dir = Path(out_dir) if out_dir else None
    matcher_sum = state_checksum(matcher.state_dict())

    def components():
        comps = {"aggregator": pipe.aggregator, "restorer": pipe.restorer}
        if disc is not None:
            comps["discriminator"] = disc
        return comps

    pipe.train()
    for it in range(1, iters + 1):
        lr, hr, ref = _batch(records, rng, config, cache)
        sr = pipe(lr, ref)
        l_rec = rec_loss(sr, hr)
        calls["rec"] += 1
        l_per = l_adv = d_loss = None
        if gan and it > config.warmup_iters:
            l_per = perceptual_loss(per_net, sr, hr)
            calls["perceptual"] += 1
            disc.requires_grad_(False)
            l_adv = -disc(sr).mean()
            calls["adversarial"] += 1
        loss = weighted_total(config, l_rec, l_per, l_adv)
        if not torch.isfinite(loss):
            pipe.load_state_dict(last_good)
            raise RestorationAborted(f"non-finite loss at iteration {it}", pipe, it)
        opt_g.zero_grad()
        loss.backward()
        opt_g.step()
        if l_adv is not None:
            disc.requires_grad_(True)
            opt_d.zero_grad()
            _, d_loss = adversarial_losses(disc, sr.detach(), hr, gen, config.lambda_gp)
            d_loss.backward()
            opt_d.step()
        curve.append((it, l_rec.item(), l_per.item() if l_per is not None else 0.0,
                      l_adv.item() if l_adv is not None else 0.0,
                      d_loss.item() if d_loss is not None else 0.0, loss.item()))
        if checkpoint_every and it % checkpoint_every == 0:
            last_good = copy.deepcopy(pipe.state_dict())
            if out_dir:
                save_checkpoint(out_dir / f"restoration_{it}.ckpt", components(), "restoration",
                                it, config_hash, matcher_checksum=matcher_sum, n_blocks=n_blocks)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "restoration_final.ckpt", components(), "restoration", iters,
                        config_hash, matcher_checksum=matcher_sum, n_blocks=n_blocks)
        with open(out_dir / "restoration_loss.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "l_rec", "l_per", "l_adv", "l_d", "total"])
            w.writerows(curve)
    pipe.eval()
    return pipe, curve, calls
