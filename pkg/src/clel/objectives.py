"""Training losses: NT-Xent, the encoder loss and the EBM loss.

Stop-gradient contract: the EBM loss sees the real latents ``z`` and the
generated samples as constants, and the encoder loss sees the generated
latents ``z_tilde`` as constants, so each loss only reaches its own network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .energy_model import EnergyModel, direction
from .errors import ArgumentError, ConfigError, TrainingDiverged


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.01
    tau: float = 0.2
    use_generated_negatives: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")


@dataclass
class TrainBatch:
    """Real and generated mini-batches for one training step.

    Attributes:
        x: real inputs, shape ``(n, ...)``.
        z: real latents ``sg(h(t(x)) / |h(t(x))|)``, unit rows.
        x_fake: SGLD samples (constants).
        z_fake: mode latents of ``x_fake`` (constants), unit rows.
        views: the two independently augmented copies of ``x`` fed to the encoder.
    """

    x: torch.Tensor
    z: torch.Tensor
    x_fake: torch.Tensor
    z_fake: torch.Tensor
    views: Optional[tuple] = None

    def __post_init__(self):
        self.z = self.z.detach()
        self.x_fake = self.x_fake.detach()
        self.z_fake = self.z_fake.detach()
        if len(self.x) != len(self.x_fake):
            raise ArgumentError("real and generated batches must have equal size")


def nt_xent(z, z_pos, negatives, tau: float) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy for a single anchor.

    Inputs are unit vectors, so the cosine similarity is a dot product.
    Computed as a log-sum-exp, which is safe for small ``tau``.
    """
    if tau <= 0:
        raise ArgumentError("tau must be positive")
    z = torch.as_tensor(z, dtype=torch.float64)
    pos = (z * torch.as_tensor(z_pos, dtype=torch.float64)).sum() / tau
    negs = torch.as_tensor(negatives, dtype=torch.float64).reshape(-1, z.shape[-1])
    logits = torch.cat([pos.reshape(1), negs @ z / tau])
    return torch.logsumexp(logits, 0) - pos


def _contrastive(v1: torch.Tensor, v2: torch.Tensor, extra_negatives: torch.Tensor | None, tau: float):
    """Mean NT-Xent over the 2n anchors of two views, with optional shared negatives."""
    n = v1.shape[0]
    v = torch.cat([direction(v1), direction(v2)]).double()
    sim = v @ v.t() / tau
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    if extra_negatives is not None:
        sim = torch.cat([sim, v @ extra_negatives.double().t() / tau], dim=1)
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    logp = sim.gather(1, target[:, None]).squeeze(1) - torch.logsumexp(sim, dim=1)
    return -logp.mean()


def simclr_loss(v1: torch.Tensor, v2: torch.Tensor, tau: float) -> torch.Tensor:
    """SimCLR objective on paired view encodings ``v1[i] <-> v2[i]``."""
    if v1.shape[0] < 2:
        raise ArgumentError("SimCLR needs n >= 2 for negatives to exist")
    return _contrastive(v1, v2, None, tau)


def encoder_loss(batch: TrainBatch, encoder: nn.Module, cfg: LossConfig) -> torch.Tensor:
    """SimCLR loss on the two views with the generated latents as extra negatives.

    The generated latents enter every anchor's negative set. Gradients reach
    only ``encoder``.
    """
    if batch.views is None:
        raise ArgumentError("encoder_loss needs augmented views")
    n = batch.views[0].shape[0]
    use_fake = cfg.use_generated_negatives and batch.z_fake is not None and len(batch.z_fake) > 0
    if n < 2 and not use_fake:
        raise ArgumentError("no negatives: n < 2 and generated negatives disabled")
    v1 = encoder(batch.views[0])
    v2 = encoder(batch.views[1])
    return _contrastive(v1, v2, batch.z_fake.detach() if use_fake else None, cfg.tau)


def ebm_loss(batch: TrainBatch, ebm: EnergyModel, cfg: LossConfig, return_parts: bool = False):
    """Mean of ``E(x, z) - E(x_fake) + alpha * (E(x)^2 + E(x_fake)^2)``.

    The positive phase uses the joint energy at the encoder latent, the
    negative phase the marginal energy. Accumulated in double precision.

    Raises:
        TrainingDiverged: if any energy is non-finite.
    """
    e_joint, e_real = ebm.energies(batch.x, batch.z.detach())
    e_fake = ebm.marginal_energy(batch.x_fake.detach())
    e_joint, e_real, e_fake = e_joint.double(), e_real.double(), e_fake.double()
    if not (torch.isfinite(e_joint).all() and torch.isfinite(e_fake).all()):
        raise TrainingDiverged("non-finite energy in EBM loss")
    loss = (e_joint - e_fake + cfg.alpha * (e_real**2 + e_fake**2)).mean()
    if return_parts:
        return loss, e_real.detach(), e_fake.detach()
    return loss
