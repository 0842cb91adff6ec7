"""
Langevin sampling and the replay buffer
=======================================

The sampler takes gradient steps on an energy plus Gaussian noise. With the
coupled setting (grad_coeff = eps^2 / 2) on a standard Gaussian energy, the
chain is an AR(1) process whose stationary variance is known exactly.
"""

import numpy as np
import torch

from clel.sgld import ReplayBuffer, SGLDConfig, draw_starts, push, run_chain, sgld_step, uniform_sampler

eps = 0.1
cfg = SGLDConfig.coupled(eps)
rng = np.random.default_rng(0)

x = torch.zeros(256, 1, dtype=torch.float64)
for _ in range(2000):                      # burn-in
    x = sgld_step(lambda v: v, x, cfg, rng)
acc = []
for _ in range(5000):
    x = sgld_step(lambda v: v, x, cfg, rng)
    acc.append(x.numpy().ravel())
a = 1 - eps**2 / 2
print("empirical variance", np.var(np.concatenate(acc)))
print("AR(1) variance    ", eps**2 / (1 - a**2))

# a double well: noise-free descent settles into the nearest well, noisy chains hop between them
well = SGLDConfig(step_count=400, grad_coeff=0.01, noise_scale=0.0)
starts = torch.linspace(-1.5, 1.5, 7, dtype=torch.float64)[:, None]
print("descent ends at", run_chain(lambda v: 4 * v * (v * v - 1), starts, well, rng=rng).numpy().ravel().round(3))

# persistent chains: starts come from the buffer, a small fraction are fresh noise
buf = ReplayBuffer(capacity=1000, reinit_prob=0.05)
init = uniform_sampler((2,), -3.0, 3.0)
push(buf, init(500, rng), rng)
starts, fresh = draw_starts(buf, 64, init, rng)
print(f"{fresh} of 64 starts are fresh; buffer holds {len(buf)} states")
