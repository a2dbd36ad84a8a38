"""VGG-style convolution stacks with named layers and weight archives.

Weight archives are ``.npz`` files holding ``<layer>.weight`` (O, I, 3, 3)
and ``<layer>.bias`` (O,) arrays, layer names ``conv1_1``, ``conv1_2``,
``conv2_1`` ...
"""
from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from torch import nn

# (name, out_channels) per conv; "pool" entries are 2x2 max pools
VGG19_LAYERS = [
    ("conv1_1", 64), ("conv1_2", 64), "pool",
    ("conv2_1", 128), ("conv2_2", 128), "pool",
    ("conv3_1", 256), ("conv3_2", 256), ("conv3_3", 256), ("conv3_4", 256), "pool",
    ("conv4_1", 512), ("conv4_2", 512), ("conv4_3", 512), ("conv4_4", 512), "pool",
    ("conv5_1", 512),
]


class WeightsError(Exception):
    pass


def build_stack(layers, last: str, final_relu: bool = True) -> nn.Sequential:
    """Sequential conv stack up to and including conv ``last``."""
    mods = OrderedDict()
    c_in, n_pool = 3, 0
    for entry in layers:
        if entry == "pool":
            n_pool += 1
            mods[f"pool{n_pool}"] = nn.MaxPool2d(2)
            continue
        name, c_out = entry
        mods[name] = nn.Conv2d(c_in, c_out, 3, 1, 1)
        c_in = c_out
        if name == last:
            if final_relu:
                mods[name.replace("conv", "relu")] = nn.ReLU()
            break
        mods[name.replace("conv", "relu")] = nn.ReLU()
    return nn.Sequential(mods)


def conv_names(module: nn.Module) -> list[str]:
    return [n for n, m in module.named_children() if isinstance(m, nn.Conv2d)]


def he_init(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()


def load_weights(module: nn.Module, path) -> None:
    """Copy conv weights from an ``.npz`` archive into ``module``."""
    path = Path(path)
    if not path.is_file():
        raise WeightsError(f"weights file not found: {path}")
    with np.load(path) as archive:
        arrays = dict(archive)
    state = {}
    for name in conv_names(module):
        conv = getattr(module, name)
        for part, param in (("weight", conv.weight), ("bias", conv.bias)):
            key = f"{name}.{part}"
            if key not in arrays:
                raise WeightsError(f"layer {name}: missing array {key!r} in {path}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(param.shape):
                raise WeightsError(f"layer {name}: {part} shape {arr.shape} != {tuple(param.shape)}")
            state[key] = torch.as_tensor(arr, dtype=param.dtype)
    module.load_state_dict(state)


def save_weights(module: nn.Module, path) -> None:
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in module.state_dict().items()})


def from_torchvision(state_dict: dict) -> dict:
    """Rename ``features.<i>.weight`` keys of a torchvision VGG to layer names."""
    convs = [e[0] for e in VGG19_LAYERS if e != "pool"]
    indices = sorted({int(k.split(".")[1]) for k in state_dict if k.startswith("features.")})
    out = {}
    for name, idx in zip(convs, indices):
        for part in ("weight", "bias"):
            out[f"{name}.{part}"] = np.asarray(state_dict[f"features.{idx}.{part}"])
    return out


def random_vgg19_archive(path, seed: int = 0) -> Path:
    """Write a seeded He-initialised VGG19 (up to conv5_1) archive.

    Stand-in for pretrained weights in tests and smoke runs.
    """
    net = build_stack(VGG19_LAYERS, "conv5_1")
    he_init(net, seed)
    save_weights(net, path)
    return Path(path)


class PerceptualFeatures(nn.Module):
    """Frozen VGG19 trunk returning the requested relu activations."""

    def __init__(self, weights_path, outputs=("relu1_1", "relu2_1", "relu3_1")):
        super().__init__()
        if weights_path is None:
            raise WeightsError("perceptual network weights are required")
        last = max(outputs, key=lambda n: [e[0] for e in VGG19_LAYERS if e != "pool"].index(
            n.replace("relu", "conv")))
        self.outputs = tuple(outputs)
        self.body = build_stack(VGG19_LAYERS, last.replace("relu", "conv"))
        load_weights(self.body, weights_path)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> dict:
        feats = {}
        for name, mod in self.body.named_children():
            x = mod(x)
            if name in self.outputs:
                feats[name] = x
                if len(feats) == len(self.outputs):
                    break
        return feats
