"""
Conditional and compositional sampling
======================================

Latents of a few points from one mode, summed and normalized, act as a
concept. Langevin chains on the joint energy E(x, z) then favour inputs whose
projected direction lines up with that concept. The concept term moves the
energy by at most 2 * beta, so at beta = 0.01 and the default sampling
temperature the pull is weak and the fractions stay near one in eight.
Needs the ``demo_run`` directory written by ``train_toy.py``.
"""

import numpy as np
import torch

from clel.data import get_spec, mode_centers, stream
from clel.evaluation import alignment, compositional_sample, conditional_sample, mode_concept, nearest_mode
from clel.sgld import uniform_sampler
from clel.trainer import load_models

ebm, encoder, cfg = load_models("demo_run/ema_final")
spec = get_spec("gauss8")
centers = mode_centers(spec)
init = uniform_sampler((2,), *spec.clamp)
sgld = cfg.sgld


def concept(mode):
    return mode_concept(encoder, spec, mode, seed=0)


for mode in (0, 3):
    s = conditional_sample(ebm, concept(mode), sgld, 500, stream(0, 50 + mode), init)
    frac = (nearest_mode(s, centers) == mode).mean()
    print(f"conditioned on mode {mode}: {frac:.2%} of samples nearest to it")

pair = [concept(0), concept(1)]
both = compositional_sample(ebm, pair, sgld, 500, stream(0, 60), init)
free = compositional_sample(ebm, [torch.zeros(ebm.d_z) + 1 / np.sqrt(ebm.d_z)], sgld, 500, stream(0, 60), init)
print("summed alignment, composed:", float(alignment(ebm, both, pair).mean()))
print("summed alignment, other   :", float(alignment(ebm, free, pair).mean()))
