"""
Energies on the latent sphere
=============================

A small tour of the energy model: the feature norm gives the marginal
energy, the feature direction (through the projector) gives the latent the
model prefers, and the joint energy sits within beta of the marginal.
"""

import numpy as np
import torch

from clel import EnergyModel, LatentEncoder, direction, ood_score

torch.manual_seed(0)
ebm = EnergyModel(input_shape=(2,), d_z=16, beta=0.5, hidden=(32, 32)).double().eval()
x = torch.randn(4, 2, dtype=torch.float64)

# marginal energy is half the squared feature norm
f = ebm.features(x)
print("E(x)         ", ebm.marginal_energy(x).detach().numpy().round(4))
print("0.5 |f(x)|^2 ", (0.5 * (f * f).sum(1)).detach().numpy().round(4))

# the mode latent g(f/|f|) minimizes E(x, .) over the sphere
z_star = ebm.mode_latent(x)
z_rand = torch.nn.functional.normalize(torch.randn(4, 16, dtype=torch.float64), dim=1)
print("E(x, z*)     ", ebm.joint_energy(x, z_star).detach().numpy().round(4))
print("E(x, random) ", ebm.joint_energy(x, z_rand).detach().numpy().round(4))

# integrating exp(-E(x, z)) over the sphere leaves a constant times exp(-E(x));
# a Monte-Carlo check at two inputs
small = EnergyModel((2,), d_z=3, beta=0.01, hidden=(16,)).double().eval()
zs = torch.nn.functional.normalize(torch.randn(200_000, 3, dtype=torch.float64), dim=1)
for xi in torch.randn(2, 1, 2, dtype=torch.float64):
    with torch.no_grad():
        gap = small.joint_energy(xi.expand(len(zs), -1), zs) - small.marginal_energy(xi)
    print("log-partition over z:", float(-(torch.logsumexp(-gap, 0) - np.log(len(zs)))))

# the OOD score evaluates the joint energy at the encoder's clean latent
enc = LatentEncoder((2,), d_z=16, hidden=(32, 32)).double()
print("ood score    ", ood_score(ebm, enc, x).detach().numpy().round(4))
print("unit latents ", direction(enc(x)).norm(dim=1).detach().numpy())
