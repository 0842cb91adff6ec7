"""Contrastive latent encoder and the augmentation policies it is trained with."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .energy_model import EnergyModel, direction
from .errors import ConfigError
from .nets import build_backbone, make_activation, mlp


class LatentEncoder(nn.Module):
    """Backbone followed by a 2-layer projection head of width ``d_z``.

    The head output is what the contrastive loss sees and what gets
    normalized into a latent.
    """

    def __init__(self, input_shape: Sequence[int] = (2,), d_z: int = 128, hidden: Sequence[int] = (128, 128),
                 activation: str = "swish"):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.d_z = d_z
        width = hidden[-1] if hidden else d_z
        self.backbone = build_backbone(self.input_shape, width, hidden[:-1] if len(hidden) > 1 else (),
                                       activation, spectral="none")
        self.head = nn.Sequential(make_activation(activation), mlp([width, width, d_z], activation, spectral="none"))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigError(f"expected inputs of shape (n, {self.input_shape}), got {tuple(x.shape)}")
        return self.head(self.backbone(x))

    encode = forward


# -- augmentation policies ----------------------------------------------------

class AugmentationPolicy:
    """Random transform family. Calling it applies an independent draw per item."""

    name = "base"

    def __call__(self, x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        raise NotImplementedError

    def scaled(self, strength: float) -> "AugmentationPolicy":
        return self


class IdentityPolicy(AugmentationPolicy):
    """Leaves inputs untouched and consumes no randomness."""

    name = "identity"

    def __call__(self, x, rng):
        return x


class JitterRotatePolicy(AugmentationPolicy):
    """Rotation about ``center`` by a uniform angle, then isotropic Gaussian jitter.

    Args:
        jitter: standard deviation of the additive noise.
        max_degrees: rotation angle is uniform in ``[-max_degrees, max_degrees]``.
        center: rotation center (the data mean).
        bounds: optional ``(lo, hi)`` clamp keeping outputs valid.
    """

    name = "jitter_rotate"

    def __init__(self, jitter=0.06, max_degrees=10.0, center=(0.0, 0.0), bounds=None):
        self.jitter = float(jitter)
        self.max_degrees = float(max_degrees)
        self.center = tuple(center)
        self.bounds = bounds

    def scaled(self, strength):
        return JitterRotatePolicy(self.jitter * strength, self.max_degrees * strength, self.center, self.bounds)

    def __call__(self, x, rng):
        n = x.shape[0]
        theta = np.deg2rad(rng.uniform(-self.max_degrees, self.max_degrees, n))
        noise = rng.standard_normal((n, 2))
        c = torch.as_tensor(self.center, dtype=x.dtype)
        cos = torch.as_tensor(np.cos(theta), dtype=x.dtype)
        sin = torch.as_tensor(np.sin(theta), dtype=x.dtype)
        d = x - c
        out = torch.stack([cos * d[:, 0] - sin * d[:, 1], sin * d[:, 0] + cos * d[:, 1]], dim=1) + c
        out = out + self.jitter * torch.as_tensor(noise, dtype=x.dtype)
        if self.bounds is not None:
            out = out.clamp(*self.bounds)
        return out


class ImagePolicy(AugmentationPolicy):
    """Crop-and-resize, horizontal flip, brightness/contrast jitter, grayscale images in [-1, 1].

    Color dropping has no effect on single-channel inputs and is omitted.
    """

    name = "image"

    def __init__(self, min_scale=0.5, flip_prob=0.5, jitter_prob=0.8, brightness=0.4, contrast=0.4):
        self.min_scale = min_scale
        self.flip_prob = flip_prob
        self.jitter_prob = jitter_prob
        self.brightness = brightness
        self.contrast = contrast

    def scaled(self, strength):
        return ImagePolicy(1 - (1 - self.min_scale) * strength, self.flip_prob * strength, self.jitter_prob,
                           self.brightness * strength, self.contrast * strength)

    def __call__(self, x, rng):
        n, _, h, w = x.shape
        out = []
        for i in range(n):
            img = x[i : i + 1]
            scale = rng.uniform(self.min_scale, 1.0)
            ch, cw = max(1, round(h * math.sqrt(scale))), max(1, round(w * math.sqrt(scale)))
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            img = img[:, :, top : top + ch, left : left + cw]
            if (ch, cw) != (h, w):
                img = F.interpolate(img, size=(h, w), mode="bilinear", align_corners=False)
            if rng.random() < self.flip_prob:
                img = img.flip(-1)
            if rng.random() < self.jitter_prob:
                b = rng.uniform(-self.brightness, self.brightness)
                c = rng.uniform(1 - self.contrast, 1 + self.contrast)
                mean = img.mean()
                img = (img - mean) * c + mean + b
            out.append(img.clamp(-1.0, 1.0))
        return torch.cat(out, dim=0)


def sample_latent(encoder: nn.Module, policy: AugmentationPolicy | None, x: torch.Tensor,
                  rng: np.random.Generator) -> torch.Tensor:
    """Draw ``z = h(t(x)) / |h(t(x))|`` with ``t`` from ``policy``."""
    if policy is not None:
        x = policy(x, rng)
    return direction(encoder(x))


def mode_latent(ebm: EnergyModel, x: torch.Tensor) -> torch.Tensor:
    return ebm.mode_latent(x)
