"""Stochastic gradient Langevin dynamics with a persistent replay buffer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ChainDiverged, ConfigError

GradFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class SGLDConfig:
    """Langevin update ``x <- clamp(x - grad_coeff * dE/dx + noise_scale * N(0, I))``.

    ``grad_coeff`` and ``noise_scale`` are independent knobs; the textbook
    coupled form has ``grad_coeff = noise_scale**2 / 2``.
    """

    step_count: int = 60
    grad_coeff: float = 1e-2
    noise_scale: float = 1e-2
    clamp_lo: Optional[float] = None
    clamp_hi: Optional[float] = None
    aug_period: int = 60
    eval_step_count: int = 600
    aug_strength: float = 0.5

    def __post_init__(self):
        if self.step_count < 0 or self.eval_step_count < 0:
            raise ConfigError("step counts must be nonnegative")
        if self.grad_coeff <= 0:
            raise ConfigError("grad_coeff must be positive")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be nonnegative")
        if self.aug_period < 1:
            raise ConfigError("aug_period must be >= 1")

    @classmethod
    def coupled(cls, eps: float, **kw) -> "SGLDConfig":
        return cls(grad_coeff=eps * eps / 2, noise_scale=eps, **kw)

    def clamp(self, x: torch.Tensor) -> torch.Tensor:
        if self.clamp_lo is None and self.clamp_hi is None:
            return x
        return x.clamp(self.clamp_lo, self.clamp_hi)


def _normal_like(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(tuple(x.shape))).to(x.dtype)


def sgld_step(grad_fn: GradFn, x: torch.Tensor, cfg: SGLDConfig, rng: np.random.Generator) -> torch.Tensor:
    """One Langevin update. Raises ChainDiverged on a non-finite gradient."""
    g = grad_fn(x)
    if not torch.isfinite(g).all():
        bad = (~torch.isfinite(g)).reshape(g.shape[0], -1).any(1).nonzero().flatten().tolist() if g.dim() else None
        raise ChainDiverged("non-finite energy gradient", state=x.detach().clone(), batch_index=bad)
    x = x - cfg.grad_coeff * g
    if cfg.noise_scale > 0:
        x = x + cfg.noise_scale * _normal_like(x, rng)
    return cfg.clamp(x)


def run_chain(grad_fn: GradFn, x0: torch.Tensor, cfg: SGLDConfig, policy=None,
              rng: np.random.Generator | None = None, n_steps: int | None = None) -> torch.Tensor:
    """Run ``n_steps`` (default ``cfg.step_count``) Langevin steps from ``x0``.

    When ``policy`` is given, a random augmentation is applied before step 0
    and then every ``cfg.aug_period`` steps.
    """
    rng = rng if rng is not None else np.random.default_rng()
    n_steps = cfg.step_count if n_steps is None else n_steps
    x = x0.detach()
    for t in range(n_steps):
        if policy is not None and t % cfg.aug_period == 0:
            x = cfg.clamp(policy(x, rng))
        try:
            x = sgld_step(grad_fn, x, cfg, rng)
        except ChainDiverged as err:
            err.step = t
            raise
    if policy is not None and n_steps == 0:
        x = cfg.clamp(policy(x, rng))
    return x.detach()


class ReplayBuffer:
    """Fixed-capacity store of chain states with random eviction of old entries."""

    def __init__(self, capacity: int = 10000, reinit_prob: float = 0.001):
        if capacity < 1:
            raise ConfigError("buffer capacity must be positive")
        if not 0.0 <= reinit_prob <= 1.0:
            raise ConfigError("reinit_prob must lie in [0, 1]")
        self.capacity = capacity
        self.reinit_prob = reinit_prob
        self.states: torch.Tensor | None = None

    def __len__(self):
        return 0 if self.states is None else self.states.shape[0]

    def push(self, states: torch.Tensor, rng: np.random.Generator) -> None:
        push(self, states, rng)

    def draw(self, n, init_sampler, rng):
        return draw_starts(self, n, init_sampler, rng)


def push(buffer: ReplayBuffer, states: torch.Tensor, rng: np.random.Generator) -> None:
    """Append ``states``; if over capacity, evict uniformly among pre-existing entries."""
    states = states.detach().clone()
    if buffer.states is None:
        old = states[:0]
    else:
        old = buffer.states
    k = states.shape[0]
    if k >= buffer.capacity:
        keep = np.sort(rng.choice(k, buffer.capacity, replace=False))
        buffer.states = states[torch.from_numpy(keep)]
        return
    room = buffer.capacity - k
    if old.shape[0] > room:
        keep = np.sort(rng.choice(old.shape[0], room, replace=False))
        old = old[torch.from_numpy(keep)]
    buffer.states = torch.cat([old, states], dim=0)


def draw_starts(buffer: ReplayBuffer, n: int, init_sampler: Callable[[int, np.random.Generator], torch.Tensor],
                rng: np.random.Generator):
    """Draw ``n`` chain starts.

    Each start is independently a fresh ``init_sampler`` draw with probability
    ``reinit_prob`` and otherwise a uniformly chosen buffer entry. An empty
    buffer yields only fresh starts.

    Returns:
        ``(starts, fresh_count)``.
    """
    if len(buffer) == 0:
        return init_sampler(n, rng), n
    fresh = rng.random(n) < buffer.reinit_prob
    idx = rng.integers(0, len(buffer), n)
    starts = buffer.states[torch.from_numpy(idx)].clone()
    n_fresh = int(fresh.sum())
    if n_fresh:
        starts[torch.from_numpy(fresh)] = init_sampler(n_fresh, rng).to(starts.dtype)
    return starts, n_fresh


def uniform_sampler(shape, lo: float, hi: float, dtype=torch.float32):
    """Return an ``init_sampler`` drawing uniform noise on ``[lo, hi]`` per coordinate."""
    shape = tuple(shape)

    def sample(n, rng):
        return torch.from_numpy(rng.uniform(lo, hi, (n, *shape))).to(dtype)

    return sample


def marginal_grad_fn(ebm) -> GradFn:
    return lambda x: ebm.energy_grad(x)


def sample_batch(ebm, buffer: ReplayBuffer | None, n: int, cfg: SGLDConfig, policy,
                 rng: np.random.Generator, init_sampler, evaluation: bool = False,
                 grad_fn: GradFn | None = None):
    """Generate ``n`` samples from the marginal energy.

    Training mode draws starts from ``buffer``, runs one ``cfg.step_count``
    segment (augmented by ``policy``) and pushes the finals back. Evaluation
    mode starts from ``init_sampler`` noise and runs ``cfg.eval_step_count``
    steps without touching the buffer.

    Returns:
        ``(samples, fresh_count)``.
    """
    was_training = ebm.training
    ebm.eval()
    grad_fn = grad_fn or marginal_grad_fn(ebm)
    try:
        if evaluation or buffer is None:
            x0, fresh = init_sampler(n, rng), n
            x = run_chain(grad_fn, x0, cfg, None, rng, n_steps=cfg.eval_step_count if evaluation else cfg.step_count)
        else:
            x0, fresh = draw_starts(buffer, n, init_sampler, rng)
            x = run_chain(grad_fn, x0, cfg, policy, rng)
    finally:
        ebm.train(was_training)
    if buffer is not None and not evaluation:
        push(buffer, x, rng)
    return x, fresh
