"""Command-line entry point: ``python -m clel <verb> [options]``.

Every verb writes ``<out>/config.txt`` (the frozen run configuration) before
doing anything else. Exit status: 0 success, 1 configuration error,
2 numerical divergence, 3 missing or unreadable artifact.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .checkpoint import save_container
from .config import RunConfig, dumps, load_config, parse_lines, write_snapshot
from .errors import ArgumentError, ChainDiverged, ConfigError, DataError, TrainingDiverged
from .energy_model import direction
from .evaluation import (EVAL_KEYS, alignment, compositional_sample, conditional_sample, cosine_histogram,
                         flexibility_check, generate_samples, mode_concept, mode_fractions, nearest_mode, ood_eval,
                         toy_report)
from .sgld import uniform_sampler
from .trainer import load_models, train

log = logging.getLogger("clel")

VERBS = ("train", "sample", "ood-eval", "cond-sample", "compose", "ablate", "plot", "flex-check")

ABLATION_GRID = {
    "model.projector": ("mlp", "linear", "identity"),
    "loss.use_generated_negatives": ("true", "false"),
    "loss.beta": ("0.0", "0.001", "0.01", "0.1"),
    "model.variant": ("norm-direction", "multi-head"),
}

EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clel", description="Train and evaluate spherical latent-variable energy models.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key (repeatable)")
    p.add_argument("--out", default="clel_out", help="artifact directory")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--checkpoint", help="checkpoint directory or model container for evaluation verbs")
    p.add_argument("--resume", help="checkpoint directory to continue training from")
    p.add_argument("--mode", default="0", help="gauss8 mode index (cond-sample) or comma list (compose)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# -- helpers ------------------------------------------------------------------------

def _overrides(args) -> list:
    lines = list(args.set)
    if args.seed is not None:
        lines.append(f"seed={args.seed}")
    return lines


def _resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from err
        parse_lines(text.splitlines(), cfg)
    parse_lines(_overrides(args), cfg)
    if not cfg.data_dir and os.environ.get("CLEL_DATA_DIR"):
        cfg.data_dir = os.environ["CLEL_DATA_DIR"]
    return cfg.validate()


def _load(args):
    if not args.checkpoint:
        raise DataError(f"{args.verb} needs --checkpoint")
    path = Path(args.checkpoint)
    if not path.exists() and not path.with_suffix(".manifest").exists():
        raise DataError(f"checkpoint {path} does not exist")
    ebm, encoder, ck_cfg = load_models(path)
    return ebm, encoder, _resolve_config(args, ck_cfg)


def _sgld_for(cfg: RunConfig):
    spec = data_mod.get_spec(cfg.dataset)
    if cfg.sgld.clamp_lo is None and cfg.sgld.clamp_hi is None:
        cfg.sgld.clamp_lo, cfg.sgld.clamp_hi = spec.clamp
    return spec, cfg.sgld, uniform_sampler(spec.shape, cfg.sgld.clamp_lo, cfg.sgld.clamp_hi)


def write_rows(path: Path, rows: list, columns=None) -> None:
    columns = columns or list(rows[0]) if rows else (columns or [])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_summary(path: Path, title: str, items: dict) -> None:
    lines = [title] + [f"{k}: {_fmt(v)}" for k, v in items.items()]
    path.write_text("\n".join(lines) + "\n")


def export_samples(out: Path, name: str, x: torch.Tensor, meta: dict) -> None:
    arr = x.detach().cpu().numpy()
    save_container(out / name, {"samples": arr}, meta)
    if arr.ndim == 2:
        data_mod.save_csv(out / f"{name}.csv", arr)
    else:
        data_mod.save_images(arr, out / f"{name}_png")


def _energy_grid(ebm, spec, out: Path, n: int = 101) -> None:
    lo, hi = spec.clamp
    g = np.linspace(lo, hi, n)
    xx, yy = np.meshgrid(g, g)
    pts = torch.from_numpy(np.stack([xx.ravel(), yy.ravel()], 1).astype(np.float32))
    with torch.no_grad():
        e = ebm.marginal_energy(pts).double().numpy()
    np.savetxt(out / "energy_grid.csv", np.column_stack([pts.numpy(), e]), delimiter=",", header="x0,x1,energy",
               comments="", fmt="%.9g")


def _hist_csv(path: Path, vectors) -> None:
    counts, edges = cosine_histogram(vectors)
    write_rows(path, [{"bin_edge": repr(float(e)), "count": int(c)} for e, c in zip(edges[:-1], counts)],
               ["bin_edge", "count"])


# -- verbs ----------------------------------------------------------------------------

def cmd_train(args, out: Path) -> int:
    if args.resume:
        if not Path(args.resume).is_dir():
            raise DataError(f"resume checkpoint {args.resume} does not exist")
        from .config import loads

        cfg = _resolve_config(args, loads((Path(args.resume) / "config.txt").read_text()))
        write_snapshot(cfg, out / "config.txt")
        state = train(cfg, outdir=out, resume=args.resume, progress_every=100)
    else:
        cfg = _resolve_config(args)
        write_snapshot(cfg, out / "config.txt")
        state = train(cfg, out, progress_every=100)
    print(f"trained {state.iteration} iterations -> {out}")
    return 0


def cmd_sample(args, out: Path) -> int:
    ebm, encoder, cfg = _load(args)
    write_snapshot(cfg, out / "config.txt")
    spec, sgld, init = _sgld_for(cfg)
    x = generate_samples(ebm, sgld, cfg.eval.n_samples, data_mod.stream(cfg.seed, EVAL_KEYS["sgld"]), init)
    export_samples(out, "samples", x, {"dataset": cfg.dataset, "seed": cfg.seed})
    if len(spec.shape) == 1:
        rep = toy_report(ebm, encoder, cfg, samples=x)
        row = {k: rep[k] for k in ("mmd", "null_q95", "null_q99", "energy_distance", "auroc_joint", "auroc_marginal")}
        if "mode_fractions" in rep:
            row["min_mode_fraction"] = float(rep["mode_fractions"].min())
        write_rows(out / "report.csv", [{"dataset": cfg.dataset, "seed": cfg.seed, "n": len(x), **row}])
        write_summary(out / "summary.txt", f"sample {cfg.dataset} seed {cfg.seed}", row)
        _energy_grid(ebm, spec, out)
        held = torch.from_numpy(data_mod.heldout(spec, 1000, cfg.seed, part=0))
        with torch.no_grad():
            f = ebm.features(held)
            _hist_csv(out / "cosine_hist_f.csv", f.numpy())
            _hist_csv(out / "cosine_hist_g.csv", ebm.project_direction(direction(f)).numpy())
            _hist_csv(out / "cosine_hist_h.csv", encoder(held).numpy())
    print(f"wrote {len(x)} samples -> {out}")
    return 0


def cmd_ood_eval(args, out: Path) -> int:
    ebm, encoder, cfg = _load(args)
    write_snapshot(cfg, out / "config.txt")
    spec = data_mod.get_spec(cfg.dataset)
    n = min(cfg.eval.n_samples, 2000)
    in_set = torch.from_numpy(data_mod.heldout(spec, n, cfg.seed, part=0))
    out_set = torch.from_numpy(data_mod.ood_counterpart(spec, n, data_mod.stream(cfg.seed, EVAL_KEYS["ood"]),
                                                        cfg.eval.ood_kind))
    rep = ood_eval(ebm, encoder, in_set, out_set, seed=cfg.seed)
    row = {**rep.row(), "ood_kind": cfg.eval.ood_kind}
    write_rows(out / "ood_report.csv", [row])
    write_summary(out / "summary.txt", f"ood-eval {cfg.dataset} vs {cfg.eval.ood_kind}",
                  {"auroc_joint": rep.value, "auroc_marginal": rep.extra["auroc_marginal"]})
    print(f"AUROC joint {rep.value:.4f} marginal {rep.extra['auroc_marginal']:.4f}")
    return 0


def _parse_modes(text: str, spec) -> list:
    try:
        modes = [int(m) for m in text.split(",") if m.strip()]
    except ValueError:
        raise ConfigError(f"bad --mode {text!r}") from None
    k = spec.params.get("n_modes", 0)
    if not modes or any(not 0 <= m < k for m in modes):
        raise ConfigError(f"--mode must list indices in [0, {k})")
    return modes


def cmd_cond_sample(args, out: Path) -> int:
    ebm, encoder, cfg = _load(args)
    write_snapshot(cfg, out / "config.txt")
    spec, sgld, init = _sgld_for(cfg)
    mode = _parse_modes(args.mode, spec)[0]
    z = mode_concept(encoder, spec, mode, cfg.seed)
    x = conditional_sample(ebm, z, sgld, 500, data_mod.stream(cfg.seed, EVAL_KEYS["cond"]), init)
    export_samples(out, "cond_samples", x, {"mode": mode})
    frac = float((nearest_mode(x, data_mod.mode_centers(spec)) == mode).mean())
    write_rows(out / "report.csv", [{"mode": mode, "n": len(x), "fraction_nearest": frac}])
    write_summary(out / "summary.txt", f"cond-sample mode {mode}", {"fraction_nearest": frac})
    print(f"{frac:.3f} of samples nearest to mode {mode}")
    return 0


def cmd_compose(args, out: Path) -> int:
    ebm, encoder, cfg = _load(args)
    write_snapshot(cfg, out / "config.txt")
    spec, sgld, init = _sgld_for(cfg)
    modes = _parse_modes(args.mode if "," in args.mode else "0,1", spec)
    concepts = [mode_concept(encoder, spec, m, cfg.seed) for m in modes]
    rng = data_mod.stream(cfg.seed, EVAL_KEYS["cond"])
    x = compositional_sample(ebm, concepts, sgld, 500, rng, init)
    base = generate_samples(ebm, sgld, 500, data_mod.stream(cfg.seed, EVAL_KEYS["cond"]), init)
    export_samples(out, "compose_samples", x, {"modes": "-".join(map(str, modes))})
    a_comp = float(alignment(ebm, x, concepts).mean())
    a_base = float(alignment(ebm, base, concepts).mean())
    fr = mode_fractions(x, data_mod.mode_centers(spec))
    row = {"modes": "-".join(map(str, modes)), "alignment": a_comp, "alignment_unconditional": a_base,
           **{f"frac_mode_{m}": fr[m] for m in modes}}
    write_rows(out / "report.csv", [row])
    write_summary(out / "summary.txt", "compose", row)
    print(f"summed alignment {a_comp:.4f} (unconditional {a_base:.4f})")
    return 0


def _ablation_cell(job):
    """Train and evaluate one grid cell; runs in a worker process when parallel."""
    cfg_text, cell_dir = job
    torch.set_num_threads(1)
    from .config import loads

    cfg = loads(cfg_text)
    state = train(cfg, cell_dir)
    rep = toy_report(state.ema, state.encoder, cfg)
    return {k: rep[k] for k in ("mmd", "null_q99", "auroc_joint", "auroc_marginal")}


def ablation_configs(base: RunConfig):
    """All 48 grid cells as ``(name, values, config)`` in a fixed order."""
    keys = list(ABLATION_GRID)
    for values in itertools.product(*ABLATION_GRID.values()):
        cfg = parse_lines([], load_config(None, dumps(base).splitlines()))
        parse_lines([f"{k} = {v}" for k, v in zip(keys, values)], cfg)
        name = "_".join(v.replace("-", "").replace(".", "p") for v in values)
        yield name, dict(zip(keys, values)), cfg.validate()


def cmd_ablate(args, out: Path) -> int:
    base = _resolve_config(args)
    write_snapshot(base, out / "config.txt")
    cells = list(ablation_configs(base))
    jobs = [(dumps(cfg), out / "cells" / name) for name, _, cfg in cells]
    workers = int(os.environ.get("CLEL_NUM_WORKERS", "1") or 1)
    if workers > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(workers, mp_context=mp.get_context("spawn")) as ex:
            results = list(ex.map(_ablation_cell, jobs))
    else:
        results = [_ablation_cell(j) for j in jobs]
    rows = []
    for (name, values, _), res in zip(cells, results):
        rows.append({"cell": name, "projector": values["model.projector"],
                     "generated_negatives": values["loss.use_generated_negatives"], "beta": values["loss.beta"],
                     "variant": values["model.variant"], **res})
    write_rows(out / "ablation.csv", rows)
    best = min(rows, key=lambda r: r["mmd"])
    write_summary(out / "summary.txt", f"ablation over {len(rows)} cells", {"best_cell": best["cell"],
                                                                             "best_mmd": best["mmd"]})
    print(f"{len(rows)} cells -> {out / 'ablation.csv'}")
    return 0


def cmd_flex_check(args, out: Path) -> int:
    cfg = _resolve_config(args)
    write_snapshot(cfg, out / "config.txt")
    rng = data_mod.stream(cfg.seed, 30)
    rows = []
    for d in (1, 2, 5, cfg.model.d_z):
        rep = flexibility_check(rng.uniform(-10.0, 10.0, 1000), d)
        rows.append(rep)
    write_rows(out / "flex_report.csv", rows, ["d", "max_discrepancy", "offset", "ok"])
    worst = max(r["max_discrepancy"] for r in rows)
    write_summary(out / "summary.txt", "flex-check", {"max_discrepancy": worst, "ok": all(r["ok"] for r in rows)})
    print(f"max discrepancy {worst:.3e}")
    return 0


def cmd_plot(args, out: Path) -> int:
    cfg = _resolve_config(args)
    write_snapshot(cfg, out / "config.txt")
    from .plotting import render_directory

    src = Path(args.checkpoint) if args.checkpoint else out
    written = render_directory(src, out / "plots")
    if not written:
        raise DataError(f"no plottable CSV artifacts in {src}")
    print(f"wrote {len(written)} plots -> {out / 'plots'}")
    return 0


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "ood-eval": cmd_ood_eval, "cond-sample": cmd_cond_sample,
            "compose": cmd_compose, "ablate": cmd_ablate, "plot": cmd_plot, "flex-check": cmd_flex_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.verb](args, out)
    except (ConfigError, ArgumentError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, ChainDiverged) as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError) as err:
        print(f"missing artifact: {err}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
