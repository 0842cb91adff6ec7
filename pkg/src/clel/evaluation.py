"""Sample-quality statistics, OOD scoring, conditional sampling and diagnostics."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .energy_model import EnergyModel, direction, ood_score
from .errors import ArgumentError, DegenerateAggregate, DegenerateFeature
from .sgld import SGLDConfig, run_chain

BANDWIDTH_FACTORS = (0.5, 1.0, 2.0)
AGGREGATE_EPS = 1e-9


# -- two-sample statistics --------------------------------------------------------

def _as_2d(a) -> np.ndarray:
    a = np.asarray(a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    if a.ndim == 1:
        return a[:, None]
    return a.reshape(a.shape[0], int(np.prod(a.shape[1:])))


def median_bandwidths(*samples, factors=BANDWIDTH_FACTORS, max_points=2000, seed=0) -> tuple:
    """Median pairwise distance of the pooled samples times each factor."""
    pooled = np.concatenate([_as_2d(s) for s in samples])
    if len(pooled) > max_points:
        pooled = pooled[np.random.default_rng(seed).choice(len(pooled), max_points, replace=False)]
    d = cdist(pooled, pooled)
    med = float(np.median(d[np.triu_indices(len(pooled), 1)]))
    return tuple(f * med for f in factors)


def _kernel(a, b, bandwidths):
    d2 = cdist(a, b, "sqeuclidean")
    return sum(np.exp(-d2 / (2.0 * bw * bw)) for bw in bandwidths)


def mmd(sample_a, sample_b, bandwidths=None, unbiased: bool = True) -> float:
    """Squared MMD with a sum of Gaussian kernels.

    Args:
        sample_a, sample_b: arrays of shape ``(n, d)`` and ``(m, d)``.
        bandwidths: kernel widths; defaults to the median heuristic times
            ``(0.5, 1, 2)`` on the pooled sample.
        unbiased: drop the diagonal terms (U-statistic). The biased form is a
            V-statistic and is always nonnegative.
    """
    a, b = _as_2d(sample_a), _as_2d(sample_b)
    if len(a) == 0 or len(b) == 0:
        raise ArgumentError("mmd needs non-empty samples")
    if a.shape[1] != b.shape[1]:
        raise ArgumentError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if bandwidths is None:
        bandwidths = median_bandwidths(a, b)
    kaa, kbb, kab = _kernel(a, a, bandwidths), _kernel(b, b, bandwidths), _kernel(a, b, bandwidths)
    m, n = len(a), len(b)
    if not unbiased:
        return float(kaa.mean() + kbb.mean() - 2 * kab.mean())
    if m < 2 or n < 2:
        raise ArgumentError("unbiased mmd needs at least two points per sample")
    taa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    tbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(taa + tbb - 2 * kab.mean())


def _kernel_matvec(pool, vecs, bandwidths, block=1024):
    """``K @ vecs`` for the kernel matrix of ``pool`` without materializing it."""
    out = np.empty((len(pool), vecs.shape[1]))
    for s in range(0, len(pool), block):
        out[s : s + block] = _kernel(pool[s : s + block], pool, bandwidths) @ vecs
    return out


def _mmd_from_sums(kw, w, k_diag, m, n, total_sum, k1):
    saa = (w * kw).sum(0)                       # w^T K w
    sab = (w * (k1[:, None] - kw)).sum(0)       # w^T K (1 - w)
    sbb = total_sum - 2 * sab - saa
    return (saa - m * k_diag) / (m * (m - 1)) + (sbb - n * k_diag) / (n * (n - 1)) - 2 * sab / (m * n)


def mmd_permutation_null(sample_a, sample_b, bandwidths, n_permutations=200, rng=None, block=1024):
    """Unbiased MMD^2 under random relabelings of the pooled samples.

    Returns:
        ``(observed, null)`` where ``null`` has ``n_permutations`` entries.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    a, b = _as_2d(sample_a), _as_2d(sample_b)
    pool = np.concatenate([a, b])
    m, n = len(a), len(b)
    w = np.zeros((m + n, n_permutations + 1))
    w[:m, 0] = 1.0
    for r in range(1, n_permutations + 1):
        w[rng.permutation(m + n)[:m], r] = 1.0
    ones = np.ones((m + n, 1))
    kw = _kernel_matvec(pool, np.concatenate([w, ones], axis=1), bandwidths, block)
    k1 = kw[:, -1]
    kw = kw[:, :-1]
    stats = _mmd_from_sums(kw, w, float(len(bandwidths)), m, n, k1.sum(), k1)
    return float(stats[0]), stats[1:]


def energy_distance(sample_a, sample_b) -> float:
    """Energy distance ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` (V-statistic)."""
    a, b = _as_2d(sample_a), _as_2d(sample_b)
    return float(2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


# -- OOD ---------------------------------------------------------------------------

def auroc(scores_in, scores_out) -> float:
    """P(out > in) with ties counted as 1/2 (Mann-Whitney form).

    Higher scores are taken to mean "more out-of-distribution".
    """
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ArgumentError("auroc needs non-empty score lists")
    s_in = np.sort(s_in)
    below = np.searchsorted(s_in, s_out, side="left")
    at_or_below = np.searchsorted(s_in, s_out, side="right")
    return float((below + 0.5 * (at_or_below - below)).sum() / (s_in.size * s_out.size))


@dataclass
class ScoreReport:
    metric: str
    value: float
    sizes: tuple
    config_hash: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d["sizes"] = "x".join(str(s) for s in self.sizes)
        extra = d.pop("extra")
        d.update(extra)
        return d


def config_hash(obj) -> str:
    text = obj if isinstance(obj, str) else json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@torch.no_grad()
def _batched(fn, x, batch=2048):
    return torch.cat([fn(x[i : i + batch]) for i in range(0, len(x), batch)])


def ood_eval(ebm: EnergyModel, encoder, in_set, out_set, config_hash: str = "", seed=None) -> ScoreReport:
    """AUROC of the joint OOD score, with the marginal-energy AUROC alongside."""
    in_set, out_set = torch.as_tensor(in_set), torch.as_tensor(out_set)
    if len(in_set) == 0 or len(out_set) == 0:
        raise ArgumentError("ood_eval needs non-empty sets")
    was = ebm.training
    ebm.eval()
    try:
        s_in = _batched(lambda x: ood_score(ebm, encoder, x), in_set).double().numpy()
        s_out = _batched(lambda x: ood_score(ebm, encoder, x), out_set).double().numpy()
        m_in = _batched(ebm.marginal_energy, in_set).double().numpy()
        m_out = _batched(ebm.marginal_energy, out_set).double().numpy()
    finally:
        ebm.train(was)
    return ScoreReport("auroc_joint", auroc(s_in, s_out), (len(in_set), len(out_set)), config_hash, seed,
                       {"auroc_marginal": auroc(m_in, m_out)})


# -- conditional / compositional sampling --------------------------------------------

def aggregate_latents(latents) -> torch.Tensor:
    """Sum unit latents and renormalize."""
    z = torch.as_tensor(np.asarray(latents)) if not isinstance(latents, torch.Tensor) else latents
    if z.dim() == 1:
        z = z[None]
    if z.shape[0] == 0:
        raise ArgumentError("aggregate_latents needs at least one latent")
    s = z.sum(0)
    norm = s.norm()
    if float(norm) <= AGGREGATE_EPS:
        raise DegenerateAggregate("latents cancel out")
    return s / norm


def conditional_sample(ebm: EnergyModel, z: torch.Tensor, cfg: SGLDConfig, n: int, rng, init_sampler,
                       n_steps: int | None = None) -> torch.Tensor:
    """SGLD on ``x -> E(x, z)`` from fresh ``init_sampler`` starts."""
    return compositional_sample(ebm, [z], cfg, n, rng, init_sampler, n_steps)


def compositional_sample(ebm: EnergyModel, concepts, cfg: SGLDConfig, n: int, rng, init_sampler,
                         n_steps: int | None = None) -> torch.Tensor:
    """SGLD on the compositional energy over ``concepts``.

    A single concept reproduces conditional sampling exactly, since the cosine
    similarity with a unit concept equals the inner product in the joint energy.
    """
    concepts = [torch.as_tensor(c) for c in concepts]
    if not concepts:
        raise ArgumentError("need at least one concept")
    was = ebm.training
    ebm.eval()

    def grad_fn(x):
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            if len(concepts) == 1:
                e = ebm.joint_energy(x, concepts[0].to(x.dtype).expand(len(x), -1))
            else:
                e = ebm.compositional_energy(x, concepts)
            (g,) = torch.autograd.grad(e.sum(), x)
        return g

    try:
        x0 = init_sampler(n, rng)
        return run_chain(grad_fn, x0, cfg, None, rng, n_steps=cfg.eval_step_count if n_steps is None else n_steps)
    finally:
        ebm.train(was)


def nearest_mode(samples, centers) -> np.ndarray:
    """Index of the closest center (Euclidean) for each sample."""
    return cdist(_as_2d(samples), _as_2d(centers)).argmin(1)


def alignment(ebm: EnergyModel, x, concepts) -> torch.Tensor:
    """Summed cosine alignment of ``g(f(x)/|f(x)|)`` with each concept."""
    with torch.no_grad():
        g = ebm.mode_latent(torch.as_tensor(x))
        return sum(g @ torch.as_tensor(c).to(g.dtype) for c in concepts)


# -- diagnostics ----------------------------------------------------------------------

HIST_EDGES = np.linspace(-1.0, 1.0, 41)


def cosine_histogram(vectors, edges=HIST_EDGES, max_pairs=10**6, seed=0):
    """Histogram of pairwise cosine similarities over unordered pairs.

    Above ``max_pairs`` pairs, a seeded uniform subsample of pairs is used.

    Returns:
        ``(counts, edges)``; the last bin is closed so that 1.0 is counted.
    """
    v = _as_2d(vectors)
    if len(v) < 2:
        raise ArgumentError("need at least two vectors")
    norms = np.linalg.norm(v, axis=1)
    if (norms <= 1e-12).any():
        raise DegenerateFeature("zero-norm vector in cosine_histogram")
    u = v / norms[:, None]
    n = len(u)
    total = n * (n - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n, 1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, max_pairs)
        j = (i + rng.integers(1, n, max_pairs)) % n
    sims = np.clip((u[i] * u[j]).sum(1), -1.0, 1.0)
    counts, edges = np.histogram(sims, bins=edges)
    return counts, edges


def flexibility_check(energies, d: int = 1) -> dict:
    """Rebuild a scalar energy on a grid as a squared-norm energy and compare densities.

    With ``b = min(energies)`` and ``f2(x) = (sqrt(E(x) - b), 0, ..., 0)`` in
    ``R^d``, the grid-normalized densities of ``exp(-E)`` and ``exp(-|f2|^2)``
    must coincide.
    """
    e = np.asarray(energies, dtype=np.float64).ravel()
    if d < 1:
        raise ArgumentError("d must be >= 1")
    b = e.min()
    f2 = np.zeros((e.size, d))
    f2[:, 0] = np.sqrt(np.maximum(e - b, 0.0))
    p1 = np.exp(-(e - b))
    p1 /= p1.sum()
    sq = (f2 * f2).sum(1)
    p2 = np.exp(-sq)
    p2 /= p2.sum()
    disc = float(np.abs(p1 - p2).max())
    return {"ok": disc < 1e-10, "max_discrepancy": disc, "offset": float(b), "d": d}


# -- end-to-end toy evaluation ---------------------------------------------------------

EVAL_KEYS = {"sgld": 20, "ood": 21, "null": 22, "cond": 23}


def generate_samples(ebm: EnergyModel, cfg: SGLDConfig, n: int, rng, init_sampler, batch: int = 1000) -> torch.Tensor:
    """``n`` evaluation samples: fresh uniform starts, ``cfg.eval_step_count`` steps each."""
    from .sgld import sample_batch

    out = []
    for s in range(0, n, batch):
        x, _ = sample_batch(ebm, None, min(batch, n - s), cfg, None, rng, init_sampler, evaluation=True)
        out.append(x)
    return torch.cat(out)


def mode_concept(encoder, spec, mode: int, seed: int, n: int = 256) -> torch.Tensor:
    """Aggregate the clean encoder latents of held-out points belonging to ``mode``."""
    from .data import heldout

    x, labels = heldout(spec, 8 * n, seed, part=2, return_labels=True)
    pts = torch.from_numpy(x[labels == mode][:n])
    with torch.no_grad():
        return aggregate_latents(direction(encoder(pts)))


def mode_fractions(samples, centers) -> np.ndarray:
    idx = nearest_mode(samples, centers)
    return np.bincount(idx, minlength=len(centers)) / len(idx)


def toy_report(ebm: EnergyModel, encoder, run_cfg, seed: int | None = None, n: int | None = None,
               n_permutations: int | None = None, samples=None) -> dict:
    """Generation and OOD metrics of a trained 2D model against held-out data.

    Draws ``n`` model samples, ``n`` held-out points and a second held-out
    split for the permutation null of the MMD statistic.

    Returns:
        dict with ``mmd``, ``null_q95``, ``null_q99``, ``energy_distance``,
        ``mode_fractions`` (gauss8 only), ``auroc_joint``, ``auroc_marginal``
        and the generated ``samples``.
    """
    from .data import get_spec, heldout, mode_centers, ood_counterpart, stream
    from .sgld import uniform_sampler

    seed = run_cfg.seed if seed is None else seed
    n = n or run_cfg.eval.n_samples
    n_permutations = n_permutations or run_cfg.eval.n_permutations
    spec = get_spec(run_cfg.dataset)
    sgld = run_cfg.sgld
    if sgld.clamp_lo is None and sgld.clamp_hi is None:
        sgld = SGLDConfig(**{**asdict(sgld), "clamp_lo": spec.clamp[0], "clamp_hi": spec.clamp[1]})
    if samples is None:
        samples = generate_samples(ebm, sgld, n, stream(seed, EVAL_KEYS["sgld"]),
                                   uniform_sampler(spec.shape, sgld.clamp_lo, sgld.clamp_hi))
    gen = samples.detach().double().numpy()
    held_a = heldout(spec, n, seed, part=0)
    held_b = heldout(spec, n, seed, part=1)
    bw = median_bandwidths(held_a, held_b)
    _, null = mmd_permutation_null(held_a, held_b, bw, n_permutations, stream(seed, EVAL_KEYS["null"]))
    report = {
        "mmd": mmd(gen, held_a, bw),
        "null_q95": float(np.percentile(null, 95)),
        "null_q99": float(np.percentile(null, 99)),
        "energy_distance": energy_distance(gen[:2000], held_a[:2000]),
        "samples": samples,
    }
    if spec.id == "gauss8":
        report["mode_fractions"] = mode_fractions(gen, mode_centers(spec))
    ood = ood_counterpart(spec, min(n, 2000), stream(seed, EVAL_KEYS["ood"]), run_cfg.eval.ood_kind)
    rep = ood_eval(ebm, encoder, torch.from_numpy(held_a[: len(ood)]), torch.from_numpy(ood))
    report["auroc_joint"] = rep.value
    report["auroc_marginal"] = rep.extra["auroc_marginal"]
    return report
