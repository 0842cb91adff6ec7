"""End-to-end acceptance criteria.

One test per criterion. Each records a verdict through the ``record`` fixture;
the verdicts are printed as one line per criterion at the end of the session.
The trained-model criteria share a session cache of gauss8 runs (16 runs of
5000 iterations, roughly an hour on one CPU core). Setting
``CLEL_ACCEPTANCE_CACHE`` to a directory keeps the trained runs on disk so a
second session only re-evaluates them.
"""

from __future__ import annotations

import filecmp
import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from clel.config import dumps, load_config
from clel.data import get_spec, mode_centers, stream
from clel.energy_model import EnergyModel, direction
from clel.evaluation import (EVAL_KEYS, compositional_sample, conditional_sample, flexibility_check, mode_concept,
                             nearest_mode, toy_report)
from clel.latent_encoder import LatentEncoder
from clel.objectives import LossConfig, TrainBatch, ebm_loss, encoder_loss, nt_xent
from clel.sgld import SGLDConfig, sgld_step, uniform_sampler
from clel.trainer import load_checkpoint, train

from conftest import unit

SEEDS = (0, 1, 2)


# -- shared trained runs ---------------------------------------------------------------

class ToyRuns:
    """Trains each (seed, overrides) gauss8 run once and caches its EMA report."""

    def __init__(self, root: Path):
        self.root = root
        self.states = {}
        self.reports = {}

    @staticmethod
    def name(seed, overrides):
        tag = "_".join(f"{k.split('.')[-1]}-{v}" for k, v in sorted(overrides.items())) or "base"
        return f"{tag}_seed{seed}"

    def config(self, seed, overrides):
        return load_config(None, [f"seed = {seed}", *(f"{k} = {v}" for k, v in overrides.items())])

    def state(self, seed, **overrides):
        key = self.name(seed, overrides)
        if key not in self.states:
            cfg = self.config(seed, overrides)
            out = self.root / key
            final = out / "checkpoints" / "final"
            if (final / "config.txt").exists() and (final / "config.txt").read_text() == dumps(cfg):
                self.states[key] = load_checkpoint(final)
            else:
                self.states[key] = train(cfg, outdir=out)
        return self.states[key]

    def report(self, seed, **overrides):
        key = self.name(seed, overrides)
        if key not in self.reports:
            st = self.state(seed, **overrides)
            self.reports[key] = toy_report(st.ema, st.encoder, st.config)
        return self.reports[key]

    def run_dir(self, seed, **overrides):
        self.state(seed, **overrides)
        return self.root / self.name(seed, overrides)


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    cache = os.environ.get("CLEL_ACCEPTANCE_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("toy_runs")
    root.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    return ToyRuns(root)


def majority(flags) -> bool:
    return sum(bool(f) for f in flags) * 2 > len(flags)


def fmt(values) -> str:
    return "[" + ", ".join(f"{v:.3g}" for v in values) + "]"


# -- 1. gradient correctness -------------------------------------------------------------

def _central_diff(fn, x, h=1e-6):
    g = torch.zeros_like(x)
    for i in range(x.numel()):
        e = torch.zeros_like(x)
        e.view(-1)[i] = h
        g.view(-1)[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def test_criterion_01_gradient_correctness(record):
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    m = EnergyModel((2,), d_z=16, beta=0.5, hidden=(32, 32)).double().eval()
    worst = 0.0
    for _ in range(20):
        x = torch.tensor(rng.uniform(-3, 3, (1, 2)))
        z = torch.tensor(unit(rng, 1, 16))
        for fn in (lambda v: m.marginal_energy(v).sum(), lambda v: m.joint_energy(v, z).sum()):
            xa = x.clone().requires_grad_(True)
            (ga,) = torch.autograd.grad(fn(xa), xa)
            with torch.no_grad():
                gf = _central_diff(fn, x)
            worst = max(worst, ((ga - gf).norm() / ga.norm()).item())
    assert record(1, worst < 1e-4, f"max relative error {worst:.2e} over 20 probes (< 1e-4)")


# -- 2. SGLD Gaussian oracle ------------------------------------------------------------

def test_criterion_02_sgld_gaussian_oracle(record):
    eps = 0.1
    a = 1 - eps**2 / 2
    target = eps**2 / (1 - a**2)
    cfg = SGLDConfig.coupled(eps)
    rng = np.random.default_rng(2)
    # parallel chains started at stationarity; 10^5 steps each
    x = torch.tensor(rng.normal(0, math.sqrt(target), (64, 1)))
    s1 = torch.zeros((), dtype=torch.float64)
    s2 = torch.zeros((), dtype=torch.float64)
    steps = 100_000
    for _ in range(steps):
        x = sgld_step(lambda v: v, x, cfg, rng)
        s1 += x.sum()
        s2 += (x * x).sum()
    mean = s1 / (steps * 64)
    var = (s2 / (steps * 64) - mean * mean).item()
    rel = abs(var / target - 1)
    assert record(2, rel < 0.05, f"variance {var:.4f} vs AR(1) {target:.4f}, relative error {rel:.2%} (< 5%)")


# -- 3. marginal constancy --------------------------------------------------------------

def test_criterion_03_marginal_constancy(record):
    torch.manual_seed(3)
    m = EnergyModel((2,), d_z=3, beta=0.01, hidden=(16,)).double().eval()
    rng = np.random.default_rng(3)
    z = torch.tensor(unit(rng, 10**6, 3))
    estimates = []
    for x in rng.uniform(-3, 3, (5, 2)):
        xt = torch.tensor(x)[None]
        with torch.no_grad():
            gap = m.joint_energy(xt.expand(len(z), -1), z) - m.marginal_energy(xt)
        estimates.append(-(torch.logsumexp(-gap, 0) - math.log(len(z))).item())
    span = max(estimates) - min(estimates)
    assert record(3, span < 1e-3, f"log-partition estimates at 5 inputs span {span:.2e} (< 1e-3)")


# -- 4. stop-gradient contract ----------------------------------------------------------

def _grads(loss, params):
    gs = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for g, p in zip(gs, params)]


def test_criterion_04_stop_gradient_contract(record):
    torch.manual_seed(4)
    ebm = EnergyModel((2,), d_z=8, beta=0.5, hidden=(16,)).double()
    enc = LatentEncoder((2,), d_z=8, hidden=(16,)).double()
    x = torch.randn(16, 2, dtype=torch.float64)
    xf = torch.randn(16, 2, dtype=torch.float64)
    v1, v2 = x + 0.05 * torch.randn_like(x), x + 0.05 * torch.randn_like(x)
    b = TrainBatch(x, direction(enc(v1)), xf, ebm.mode_latent(xf), views=(v1, v2))
    l_ebm = ebm_loss(b, ebm, LossConfig(beta=0.5))
    l_le = encoder_loss(b, enc, LossConfig())
    leak_ebm = max(g.abs().max().item() for g in _grads(l_ebm, list(enc.parameters())))
    leak_le = max(g.abs().max().item() for g in _grads(l_le, list(ebm.parameters())))
    ok = leak_ebm == 0.0 and leak_le == 0.0
    assert record(4, ok, f"max |dL_EBM/dphi| = {leak_ebm}, max |dL_LE/dtheta| = {leak_le} (both exactly 0)")


# -- 5. NT-Xent closed forms ------------------------------------------------------------

def test_criterion_05_nt_xent_closed_forms(record):
    z = np.array([1.0, 0.0])
    neg = np.array([[0.0, 1.0]])
    errs = [
        abs(nt_xent(z, np.array([0.6, 0.8]), np.zeros((0, 2)), 0.7).item()),
        abs(nt_xent(z, z, neg, 1.0).item() - math.log1p(math.exp(-1))),
        abs(nt_xent(z, z, neg, 0.5).item() - math.log1p(math.exp(-2))),
    ]
    assert record(5, max(errs) < 1e-12, f"errors {fmt(errs)} (< 1e-12)")


# -- 6. toy generation quality ----------------------------------------------------------

def test_criterion_06_toy_generation(toy_runs, record):
    mmds, nulls, mins, ok = [], [], [], []
    for seed in SEEDS:
        r = toy_runs.report(seed)
        mmds.append(r["mmd"])
        nulls.append(r["null_q99"])
        mins.append(float(r["mode_fractions"].min()))
        ok.append(r["mmd"] < r["null_q99"] and mins[-1] >= 0.05)
    detail = f"MMD^2 {fmt(mmds)} vs null 99th pct {fmt(nulls)}, min mode fraction {fmt(mins)}, seeds passing {sum(ok)}/3"
    assert record(6, majority(ok), detail)


# -- 7. beta ablation trend ------------------------------------------------------------

def test_criterion_07_beta_trend(toy_runs, record):
    ok, rows = [], []
    for seed in SEEDS:
        m0 = toy_runs.report(seed, **{"loss.beta": 0.0})["mmd"]
        m1 = toy_runs.report(seed)["mmd"]
        m2 = toy_runs.report(seed, **{"loss.beta": 0.1})["mmd"]
        rows.append(f"{m0:.2e}/{m1:.2e}/{m2:.2e}")
        ok.append(m1 < m0 and m1 < m2)
    detail = f"MMD^2 at beta 0/0.01/0.1 per seed {rows}, seeds passing {sum(ok)}/3"
    assert record(7, majority(ok), detail)


# -- 8. projector ablation trend ---------------------------------------------------------

def test_criterion_08_projector_trend(toy_runs, record):
    ok, rows = [], []
    for seed in SEEDS:
        m_mlp = toy_runs.report(seed)["mmd"]
        m_id = toy_runs.report(seed, **{"model.projector": "identity"})["mmd"]
        rows.append(f"{m_id:.2e}/{m_mlp:.2e}")
        ok.append(m_id > m_mlp)
    detail = f"MMD^2 identity/mlp per seed {rows}, seeds passing {sum(ok)}/3"
    assert record(8, majority(ok), detail)


# -- 9. OOD -----------------------------------------------------------------------------

def test_criterion_09_ood(toy_runs, record):
    ok, joint, marg = [], [], []
    for seed in SEEDS:
        r = toy_runs.report(seed)
        joint.append(r["auroc_joint"])
        marg.append(r["auroc_marginal"])
        ok.append(r["auroc_joint"] > 0.95 and r["auroc_joint"] >= r["auroc_marginal"])
    detail = f"AUROC joint {fmt(joint)}, marginal {fmt(marg)}, seeds passing {sum(ok)}/3"
    assert record(9, majority(ok), detail)


# -- 10. conditional sampling -------------------------------------------------------------

def test_criterion_10_conditional(toy_runs, record):
    spec = get_spec("gauss8")
    centers = mode_centers(spec)
    ok, fracs = [], []
    identical = True
    for seed in SEEDS:
        st = toy_runs.state(seed)
        sgld = st.config.sgld
        init = uniform_sampler(spec.shape, sgld.clamp_lo, sgld.clamp_hi)
        mode = (3 * seed) % 8
        z = mode_concept(st.encoder, spec, mode, seed)
        x = conditional_sample(st.ema, z, sgld, 500, stream(seed, EVAL_KEYS["cond"]), init)
        fracs.append(float((nearest_mode(x, centers) == mode).mean()))
        ok.append(fracs[-1] >= 0.8)
        if seed == SEEDS[0]:
            y = compositional_sample(st.ema, [z], sgld, 500, stream(seed, EVAL_KEYS["cond"]), init)
            identical = torch.equal(x, y)
    detail = (f"fraction nearest the conditioned mode {fmt(fracs)} (>= 0.8), seeds passing {sum(ok)}/3, "
              f"single-concept composition bit-identical: {identical}")
    assert record(10, majority(ok) and identical, detail)


# -- 11. norm flexibility ---------------------------------------------------------------

def test_criterion_11_norm_flexibility(record):
    rng = np.random.default_rng(11)
    worst = 0.0
    for d in (1, 2, 5, 128):
        rep = flexibility_check(rng.uniform(-10, 10, 1000), d=d)
        worst = max(worst, rep["max_discrepancy"])
    assert record(11, worst < 1e-10, f"max discrepancy {worst:.2e} over d in (1, 2, 5, 128) (< 1e-10)")


# -- 12. multi-head instability trend ----------------------------------------------------

def test_criterion_12_multihead_trend(toy_runs, record):
    ok, rows = [], []
    for seed in SEEDS:
        m_nd = toy_runs.report(seed)["mmd"]
        m_mh = toy_runs.report(seed, **{"model.variant": "multi-head"})["mmd"]
        rows.append(f"{m_mh:.2e}/{m_nd:.2e}")
        ok.append(m_mh >= m_nd)
    detail = f"final MMD^2 multi-head/norm-direction per seed {rows}, seeds passing {sum(ok)}/3"
    assert record(12, majority(ok), detail)


# -- 13. reproducibility ----------------------------------------------------------------

def test_criterion_13_reproducibility(toy_runs, tmp_path, record):
    first = toy_runs.run_dir(0) / "checkpoints" / "final"
    train(toy_runs.config(0, {}), outdir=tmp_path / "again")
    second = tmp_path / "again" / "checkpoints" / "final"
    files = sorted(p.name for p in first.iterdir())
    differing = [f for f in files if not filecmp.cmp(first / f, second / f, shallow=False)]
    detail = f"{len(files) - len(differing)}/{len(files)} final checkpoint files byte-identical"
    if differing:
        detail += f"; differing: {differing}"
    assert record(13, not differing and len(files) > 0, detail)
