"""
Diagnostics: cosine histograms, norm flexibility, MMD
=====================================================

Checks that do not need a trained model.
"""

import numpy as np

from clel.data import generate, get_spec, stream
from clel.evaluation import cosine_histogram, flexibility_check, median_bandwidths, mmd, mmd_permutation_null

# pairwise cosine similarities of uniform points on a high-dimensional sphere
# concentrate around 0 with spread 1/sqrt(d)
rng = np.random.default_rng(0)
v = rng.standard_normal((3000, 128))
counts, edges = cosine_histogram(v, edges=np.linspace(-1, 1, 201))
mids = (edges[:-1] + edges[1:]) / 2
p = counts / counts.sum()
print("mean cos", (p * mids).sum(), "std", np.sqrt((p * mids**2).sum()), "1/sqrt(128)", 1 / np.sqrt(128))

# any scalar energy on a grid can be written as a squared norm
print(flexibility_check(rng.uniform(-3, 8, 1000), d=5))

# two independent draws of the same density sit inside the permutation null
spec = get_spec("gauss8")
a, b = generate(spec, 2000, stream(0, 1)), generate(spec, 2000, stream(0, 2))
bw = median_bandwidths(a, b)
obs, null = mmd_permutation_null(a, b, bw, n_permutations=100, rng=rng)
print("MMD^2", obs, "null 95th pct", np.percentile(null, 95))
print("shifted sample:", mmd(a, b + 0.3, bw))
