"""Descriptor extractors for correspondence matching.

Each extractor is the VGG-16 trunk up to conv3_1 (no final relu): output
stride 4, 256 channels. A matcher holds two of them with separate weights,
one for the input image and one for the reference.
"""
from __future__ import annotations

import hashlib

import torch
from torch import nn

from .vgg import VGG19_LAYERS, build_stack, he_init, load_weights

DESCRIPTOR_CHANNELS = 256
STRIDE = 4
INIT_TAGS = ("vgg16_pretrained", "random")


def build_extractor(init: str = "random", rng_seed: int = 0, weights_path=None) -> nn.Sequential:
    if init not in INIT_TAGS:
        raise ValueError(f"unknown init {init!r}")
    # VGG16 and VGG19 coincide up to conv3_1
    net = build_stack(VGG19_LAYERS, "conv3_1", final_relu=False)
    if init == "vgg16_pretrained":
        if weights_path is None:
            raise ValueError("vgg16_pretrained init needs a weights file")
        load_weights(net, weights_path)
    else:
        he_init(net, rng_seed)
    return net


def extract(extractor: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) image in [0, 1] -> (B, 256, H/4, W/4) descriptor field."""
    h, w = image.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image size {h}x{w} must be a multiple of {STRIDE}")
    if not torch.isfinite(image).all():
        raise ValueError("non-finite input pixels")
    return extractor(image)


class ContrastiveMatcher(nn.Module):
    """Pair of non-shared extractors: ``input_net`` and ``ref_net``."""

    def __init__(self, init: str = "random", seed: int = 0, weights_path=None):
        super().__init__()
        self.init_tag = init
        self.input_net = build_extractor(init, seed, weights_path)
        self.ref_net = build_extractor(init, seed + 1, weights_path)

    def forward(self, image: torch.Tensor, reference: torch.Tensor):
        return extract(self.input_net, image), extract(self.ref_net, reference)


def student_forward(student: ContrastiveMatcher, lr_upsampled: torch.Tensor,
                    hr_reference: torch.Tensor):
    """Fields of the upsampled LR input and of the HR reference (equal sizes)."""
    if lr_upsampled.shape[-2:] != hr_reference.shape[-2:]:
        raise ValueError(f"upsampled LR {tuple(lr_upsampled.shape[-2:])} does not match "
                         f"reference {tuple(hr_reference.shape[-2:])}")
    return student(lr_upsampled, hr_reference)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
