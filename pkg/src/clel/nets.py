"""Small building blocks: spectrally normalized layers and desk-scale backbones."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

_SN_EPS = 1e-12


class _SpectralMixin:
    """Spectral normalization via power iteration on the weight viewed as a matrix.

    One power-iteration step runs per forward pass in training mode; the left
    singular-vector estimate ``sn_u`` is a persistent buffer so that evaluation
    (and checkpoint round trips) see the same normalized weight.
    """

    def _init_spectral(self, spectral: bool, init_iters: int) -> None:
        self.spectral = spectral
        if not spectral:
            return
        w = self.weight.detach().reshape(self.weight.shape[0], -1)
        u = F.normalize(torch.randn(w.shape[0], dtype=w.dtype), dim=0, eps=_SN_EPS)
        for _ in range(init_iters):
            v = F.normalize(w.t() @ u, dim=0, eps=_SN_EPS)
            u = F.normalize(w @ v, dim=0, eps=_SN_EPS)
        self.register_buffer("sn_u", u)

    def power_iteration(self, n_iter: int = 1) -> None:
        w = self.weight.detach().reshape(self.weight.shape[0], -1)
        u = self.sn_u
        with torch.no_grad():
            for _ in range(n_iter):
                v = F.normalize(w.t() @ u, dim=0, eps=_SN_EPS)
                u = F.normalize(w @ v, dim=0, eps=_SN_EPS)
            self.sn_u.copy_(u)

    def normalized_weight(self) -> torch.Tensor:
        if not self.spectral:
            return self.weight
        if self.training:
            self.power_iteration(1)
        w = self.weight.reshape(self.weight.shape[0], -1)
        u = self.sn_u.clone()
        v = F.normalize(w.detach().t() @ u, dim=0, eps=_SN_EPS)
        sigma = u @ w @ v
        return self.weight / sigma


class SNLinear(_SpectralMixin, nn.Linear):
    def __init__(self, in_features, out_features, bias=True, spectral=True, init_iters=50):
        super().__init__(in_features, out_features, bias=bias)
        self._init_spectral(spectral, init_iters)

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


class SNConv2d(_SpectralMixin, nn.Conv2d):
    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, spectral=True, init_iters=50):
        super().__init__(in_ch, out_ch, kernel_size, stride=stride, padding=padding)
        self._init_spectral(spectral, init_iters)

    def forward(self, x):
        return self._conv_forward(x, self.normalized_weight(), self.bias)


def spectral_layers(module: nn.Module):
    """Yield every layer of ``module`` that carries a spectral constraint."""
    for m in module.modules():
        if isinstance(m, _SpectralMixin) and m.spectral:
            yield m


ACTIVATIONS = ("swish", "softplus", "leaky_relu")


def make_activation(name: str) -> nn.Module:
    if name == "swish":
        return nn.SiLU()
    if name == "softplus":
        return nn.Softplus()
    if name == "leaky_relu":
        return nn.LeakyReLU(0.2)
    raise ValueError(f"unknown activation {name!r}")


SPECTRAL_MODES = ("all", "hidden", "inner", "conv", "none")


def mlp(
    dims: Sequence[int],
    activation: str = "swish",
    spectral: str = "all",
    bias: bool = True,
) -> nn.Sequential:
    """Multilayer perceptron with optional spectral normalization.

    Args:
        dims: layer widths, input first.
        activation: nonlinearity between affine maps (none after the last).
        spectral: ``"all"`` constrains every affine map, ``"hidden"`` all but
            the output map, ``"inner"`` all but the input map. ``"conv"``
            constrains convolutions only, so it leaves every affine map free,
            as does ``"none"``.
        bias: whether affine maps carry a bias.
    """
    if spectral not in SPECTRAL_MODES:
        raise ValueError(f"unknown spectral mode {spectral!r}")
    layers: list[nn.Module] = []
    n = len(dims) - 1
    for i in range(n):
        last = i == n - 1
        sn = spectral == "all" or (spectral == "hidden" and not last) or (spectral == "inner" and i > 0)
        layers.append(SNLinear(dims[i], dims[i + 1], bias=bias, spectral=sn))
        if not last:
            layers.append(make_activation(activation))
    return nn.Sequential(*layers)


class ConvFeatureNet(nn.Module):
    """Three strided convolutions and a 2-layer head for 1x28x28 images."""

    def __init__(self, out_dim=128, width=32, activation="swish", spectral="all"):
        super().__init__()
        conv_sn = spectral != "none"
        act = make_activation(activation)
        self.body = nn.Sequential(
            SNConv2d(1, width, 3, stride=2, padding=1, spectral=conv_sn), act,
            SNConv2d(width, 2 * width, 3, stride=2, padding=1, spectral=conv_sn), act,
            SNConv2d(2 * width, 2 * width, 3, stride=2, padding=1, spectral=conv_sn), act,
            nn.Flatten(),
        )
        self.head = mlp([2 * width * 16, 128, out_dim], activation, "none" if spectral == "conv" else spectral)

    def forward(self, x):
        return self.head(self.body(x))


def build_backbone(input_shape, out_dim, hidden=(128, 128), activation="swish", spectral="all"):
    """Pick the desk-scale backbone for vector or image inputs."""
    input_shape = tuple(input_shape)
    if len(input_shape) == 1:
        return mlp([input_shape[0], *hidden, out_dim], activation, spectral)
    if input_shape == (1, 28, 28):
        return ConvFeatureNet(out_dim, activation=activation, spectral=spectral)
    raise ValueError(f"no backbone for input shape {input_shape}")
