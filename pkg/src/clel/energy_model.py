"""Spherical latent-variable energy model.

The feature network ``f`` maps an input to a vector whose squared norm gives
the marginal energy and whose direction, passed through the directional
projector ``g``, predicts the latent on the unit sphere::

    E(x, z) = 0.5 * |f(x)|^2 - beta * g(f(x) / |f(x)|)^T z
    E(x)    = 0.5 * |f(x)|^2

The multi-head variant replaces the norm term with a separate scalar head.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ArgumentError, ConfigError, DegenerateFeature, DegenerateProjection
from .nets import build_backbone, mlp

FEATURE_EPS = 1e-12

PROJECTORS = ("mlp", "linear", "identity")
VARIANTS = ("norm-direction", "multi-head")


def direction(f: torch.Tensor) -> torch.Tensor:
    """Normalize feature vectors along the last axis.

    Raises:
        DegenerateFeature: if any vector has norm at most 1e-12.
    """
    norm = f.norm(dim=-1, keepdim=True)
    if bool((norm <= FEATURE_EPS).any()):
        raise DegenerateFeature("feature vector norm below 1e-12")
    return f / norm


class DirectionalProjector(nn.Module):
    """Map from the sphere to the sphere: ``normalize(W2 leaky_relu(W1 u))``.

    ``kind="linear"`` drops the hidden layer and ``kind="identity"`` returns
    its input unchanged.
    """

    def __init__(self, d_z: int, kind: str = "mlp", hidden: int | None = None, slope: float = 0.2):
        super().__init__()
        if kind not in PROJECTORS:
            raise ConfigError(f"unknown projector {kind!r}")
        self.kind = kind
        self.slope = slope
        hidden = hidden or d_z
        if kind == "mlp":
            self.w1 = nn.Linear(d_z, hidden, bias=False)
            self.w2 = nn.Linear(hidden, d_z, bias=False)
        elif kind == "linear":
            self.w1 = nn.Linear(d_z, d_z, bias=False)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        if self.kind == "identity":
            return u
        if self.kind == "linear":
            p = self.w1(u)
        else:
            p = self.w2(F.leaky_relu(self.w1(u), self.slope))
        norm = p.norm(dim=-1, keepdim=True)
        if bool((norm <= FEATURE_EPS).any()):
            raise DegenerateProjection("projected vector norm below 1e-12")
        return p / norm


class EnergyModel(nn.Module):
    """Latent-variable EBM ``(f, g)`` with a fixed coupling strength ``beta``.

    Args:
        input_shape: shape of a single input (``(2,)`` for toy data).
        d_z: feature and latent dimension.
        beta: weight of the latent alignment term, must be nonnegative.
        projector: one of ``"mlp"``, ``"linear"``, ``"identity"``.
        variant: ``"norm-direction"`` or ``"multi-head"``.
        hidden: hidden widths of the vector backbone.
        spectral: spectral-normalization mode for the backbone.
        feature_net: optional prebuilt backbone overriding the default one.
    """

    def __init__(
        self,
        input_shape: Sequence[int] = (2,),
        d_z: int = 128,
        beta: float = 0.01,
        projector: str = "mlp",
        variant: str = "norm-direction",
        hidden: Sequence[int] = (128, 128),
        activation: str = "swish",
        spectral: str = "conv",
        feature_net: nn.Module | None = None,
    ):
        super().__init__()
        if beta < 0:
            raise ConfigError("beta must be nonnegative")
        if variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {variant!r}")
        self.input_shape = tuple(input_shape)
        self.d_z = d_z
        self.beta = float(beta)
        self.variant = variant
        self.feature_net = feature_net or build_backbone(input_shape, d_z, hidden, activation, spectral)
        self.projector = DirectionalProjector(d_z, projector)
        self.head_prime = mlp([d_z, d_z, 1], activation, spectral="none") if variant == "multi-head" else None

    # -- features ---------------------------------------------------------
    def features(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigError(f"expected inputs of shape (n, {self.input_shape}), got {tuple(x.shape)}")
        return self.feature_net(x)

    forward = features

    def project_direction(self, u: torch.Tensor) -> torch.Tensor:
        return self.projector(u)

    def mode_latent(self, x: torch.Tensor) -> torch.Tensor:
        """Latent minimizing the joint energy at ``x``: ``g(f(x) / |f(x)|)``."""
        return self.projector(direction(self.features(x)))

    # -- energies ---------------------------------------------------------
    def _marginal_from_features(self, f: torch.Tensor) -> torch.Tensor:
        if self.variant == "multi-head":
            return self.head_prime(f).squeeze(-1)
        return 0.5 * (f * f).sum(-1)

    def marginal_energy(self, x: torch.Tensor) -> torch.Tensor:
        return self._marginal_from_features(self.features(x))

    def joint_energy(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        f = self.features(x)
        e = self._marginal_from_features(f)
        if self.beta == 0:
            return e
        g = self.projector(direction(f))
        return e - self.beta * (g * z).sum(-1)

    def energies(self, x: torch.Tensor, z: torch.Tensor):
        """Joint and marginal energy from a single feature pass."""
        f = self.features(x)
        e = self._marginal_from_features(f)
        if self.beta == 0:
            return e, e
        g = self.projector(direction(f))
        return e - self.beta * (g * z).sum(-1), e

    def compositional_energy(self, x: torch.Tensor, concepts, squared_norm: bool = True) -> torch.Tensor:
        """Energy conditioned on every concept latent at once.

        ``squared_norm=False`` uses ``0.5 * |f(x)|`` as the norm term instead of
        the squared form.
        """
        concepts = list(concepts)
        if not concepts:
            raise ArgumentError("compositional_energy needs at least one concept")
        f = self.features(x)
        if self.variant == "multi-head":
            e = self._marginal_from_features(f)
        elif squared_norm:
            e = 0.5 * (f * f).sum(-1)
        else:
            e = 0.5 * f.norm(dim=-1)
        if self.beta == 0:
            return e
        g = self.projector(direction(f))
        align = sum(F.cosine_similarity(g, c.to(g.dtype).expand_as(g), dim=-1, eps=FEATURE_EPS) for c in concepts)
        return e - self.beta * align

    def multihead_energy(self, x: torch.Tensor, z: torch.Tensor):
        """Return ``(E(x), E(z|x))`` of the multi-head variant.

        ``E(x)`` comes from the scalar head and ``E(z|x) = -z^T g(f(x))``.
        """
        if self.variant != "multi-head":
            raise ConfigError("multihead_energy requires variant='multi-head'")
        f = self.features(x)
        g = self.projector(direction(f))
        return self.head_prime(f).squeeze(-1), -(g * z).sum(-1)

    def energy_grad(self, x: torch.Tensor, z: torch.Tensor | None = None) -> torch.Tensor:
        """Gradient of the (joint, if ``z`` is given) energy w.r.t. ``x``."""
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            e = self.marginal_energy(x) if z is None else self.joint_energy(x, z)
            (g,) = torch.autograd.grad(e.sum(), x)
        return g


def ood_score(ebm: EnergyModel, encoder: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Per-sample OOD score: the joint energy at the clean encoder latent.

    Higher means more out-of-distribution.
    """
    z = direction(encoder(x))
    return ebm.joint_energy(x, z)
