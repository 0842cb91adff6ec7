"""
Training on the eight-Gaussian ring
===================================

Joint training of the energy model and the contrastive encoder on the 2D
eight-mode mixture, followed by sample-quality and OOD metrics. The default
schedule is 5000 iterations (a few minutes on one CPU core); pass a smaller
count as the first argument for a quick look.
"""

import sys

import numpy as np

from clel.config import load_config
from clel.data import get_spec, mode_centers
from clel.evaluation import toy_report
from clel.trainer import train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
cfg = load_config(None, [f"train.total_iters = {iters}", f"train.warmup_iters = {min(2000, iters)}"])
state = train(cfg, outdir="demo_run", progress_every=500)

# energies of real data and of chain samples should meet during training
h = state.history
for rec in (h[0], h[len(h) // 2], h[-1]):
    print(f"iter {rec['iter']:5d}  E(real) {rec['energy_real_mean']:.4f}  E(fake) {rec['energy_fake_mean']:.4f}")

rep = toy_report(state.ema, state.encoder, cfg, n=2000, n_permutations=100)
print("MMD^2", rep["mmd"], "null 99th pct", rep["null_q99"])
print("samples per mode", np.round(rep["mode_fractions"], 3))
print("AUROC joint", rep["auroc_joint"], "marginal", rep["auroc_marginal"])

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    s = rep["samples"].numpy()
    c = mode_centers(get_spec("gauss8"))
    plt.scatter(s[:, 0], s[:, 1], s=1, alpha=0.3)
    plt.scatter(c[:, 0], c[:, 1], marker="x", color="k")
    plt.gca().set_aspect("equal")
    plt.savefig("demo_run/samples.png", dpi=120)
except ImportError:
    pass
