"""Joint training loop for the energy model and the contrastive latent encoder."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig, loads, write_snapshot
from .data import DatasetSpec, generate, get_spec, load_images, stream
from .energy_model import EnergyModel, direction
from .errors import ChainDiverged, ConfigError, DataError, TrainingDiverged
from .latent_encoder import ImagePolicy, JitterRotatePolicy, LatentEncoder
from .objectives import TrainBatch, ebm_loss, encoder_loss
from .sgld import ReplayBuffer, sample_batch, uniform_sampler

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "loss_ebm", "loss_le", "energy_real_mean", "energy_fake_mean", "buffer_size",
                  "fresh_starts", "lr_ebm", "wall_time_s")

STREAM_KEYS = {"data": 0, "sgld": 2, "aug": 3}


def warmup_lr(base_lr: float, iteration: int, warmup_iters: int) -> float:
    """Linear warmup: ``base_lr * min(1, iteration / warmup_iters)``."""
    if warmup_iters <= 0:
        return base_lr
    return base_lr * min(1.0, iteration / warmup_iters)


@torch.no_grad()
def update_ema(shadow, live, decay: float):
    """In-place ``shadow = decay * shadow + (1 - decay) * live``.

    Accepts modules (parameters are averaged, buffers such as spectral-norm
    vectors are copied) or dicts of tensors.
    """
    if isinstance(shadow, torch.nn.Module):
        s_params = dict(shadow.named_parameters())
        l_params = dict(live.named_parameters())
        if s_params.keys() != l_params.keys():
            raise ConfigError("EMA shadow and live model differ in structure")
        for k, p in s_params.items():
            _blend(p, l_params[k], decay, k)
        l_bufs = dict(live.named_buffers())
        for k, b in shadow.named_buffers():
            b.copy_(l_bufs[k])
        return shadow
    if shadow.keys() != live.keys():
        raise ConfigError("EMA shadow and live parameters differ in names")
    for k in shadow:
        _blend(shadow[k], live[k], decay, k)
    return shadow


def _blend(s, l, decay, name):
    if s.shape != l.shape:
        raise ConfigError(f"EMA shape mismatch for {name}: {tuple(s.shape)} vs {tuple(l.shape)}")
    s.mul_(decay).add_(l, alpha=1.0 - decay)


# -- data sources ---------------------------------------------------------------------

class ToySource:
    """Fresh i.i.d. batches from a 2D generator."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec

    def next_batch(self, n, rng):
        return torch.from_numpy(generate(self.spec, n, rng))

    def state(self):
        return {}

    def load_state(self, state):
        pass


class ArraySource:
    """Epoch-wise shuffled batches over a fixed array."""

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data, dtype=np.float32)
        self.perm = None
        self.pos = 0

    def next_batch(self, n, rng):
        idx = []
        while len(idx) < n:
            if self.perm is None or self.pos >= len(self.perm):
                self.perm = rng.permutation(len(self.data))
                self.pos = 0
            take = min(n - len(idx), len(self.perm) - self.pos)
            idx.extend(self.perm[self.pos : self.pos + take].tolist())
            self.pos += take
        return torch.from_numpy(self.data[idx])

    def state(self):
        return {"perm": None if self.perm is None else self.perm.tolist(), "pos": self.pos}

    def load_state(self, state):
        self.perm = None if state.get("perm") is None else np.asarray(state["perm"])
        self.pos = state.get("pos", 0)


def make_source(cfg: RunConfig, spec: DatasetSpec, data=None):
    if data is not None:
        return ArraySource(data)
    if spec.id == "image_dir":
        if not cfg.data_dir:
            raise ConfigError("dataset image_dir needs data_dir")
        return ArraySource(load_images(cfg.data_dir))
    return ToySource(spec)


# -- state ------------------------------------------------------------------------------

@dataclass
class TrainState:
    config: RunConfig
    spec: DatasetSpec
    ebm: EnergyModel
    encoder: LatentEncoder
    ema: EnergyModel
    opt_ebm: torch.optim.Optimizer
    opt_enc: torch.optim.Optimizer
    buffer: ReplayBuffer
    rngs: dict
    source: object
    iteration: int = 0
    enc_policy: object = None
    sgld_policy: object = None
    init_sampler: object = None
    history: list = field(default_factory=list)


def build_models(cfg: RunConfig, spec: DatasetSpec):
    """Construct the energy model and encoder with seed-determined initial weights."""
    m = cfg.model
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        ebm = EnergyModel(spec.shape, m.d_z, cfg.loss.beta, m.projector, m.variant, m.hidden, m.activation,
                          m.spectral)
        encoder = LatentEncoder(spec.shape, m.d_z, cfg.encoder.hidden, m.activation)
    return ebm, encoder


def make_policies(cfg: RunConfig, spec: DatasetSpec):
    if len(spec.shape) == 1:
        enc = JitterRotatePolicy(cfg.encoder.jitter, cfg.encoder.max_degrees, (0.0, 0.0), spec.clamp)
    else:
        enc = ImagePolicy()
    strength = cfg.sgld.aug_strength
    return enc, (enc.scaled(strength) if strength > 0 else None)


def init_state(cfg: RunConfig, data=None) -> TrainState:
    cfg.validate()
    spec = get_spec(cfg.dataset)
    if cfg.sgld.clamp_lo is None and cfg.sgld.clamp_hi is None:
        cfg.sgld.clamp_lo, cfg.sgld.clamp_hi = spec.clamp
    ebm, encoder = build_models(cfg, spec)
    ema = copy.deepcopy(ebm)
    ema.requires_grad_(False)
    opt_ebm = torch.optim.Adam(ebm.parameters(), lr=cfg.ebm_opt.lr, betas=(cfg.ebm_opt.beta1, cfg.ebm_opt.beta2))
    opt_enc = torch.optim.SGD(encoder.parameters(), lr=cfg.enc_opt.lr, momentum=cfg.enc_opt.momentum,
                              weight_decay=cfg.enc_opt.weight_decay)
    enc_policy, sgld_policy = make_policies(cfg, spec)
    rngs = {name: stream(cfg.seed, key) for name, key in STREAM_KEYS.items()}
    lo, hi = cfg.sgld.clamp_lo, cfg.sgld.clamp_hi
    return TrainState(cfg, spec, ebm, encoder, ema, opt_ebm, opt_enc,
                      ReplayBuffer(cfg.buffer.capacity, cfg.buffer.reinit_prob), rngs, make_source(cfg, spec, data),
                      enc_policy=enc_policy, sgld_policy=sgld_policy, init_sampler=uniform_sampler(spec.shape, lo, hi))


# -- one step ---------------------------------------------------------------------------

def _snapshot(state: TrainState):
    return {
        "ebm": copy.deepcopy(state.ebm.state_dict()),
        "encoder": copy.deepcopy(state.encoder.state_dict()),
        "ema": copy.deepcopy(state.ema.state_dict()),
        "opt_ebm": copy.deepcopy(state.opt_ebm.state_dict()),
        "opt_enc": copy.deepcopy(state.opt_enc.state_dict()),
        "buffer": state.buffer.states,
        "iteration": state.iteration,
    }


def _restore(state: TrainState, snap):
    state.ebm.load_state_dict(snap["ebm"])
    state.encoder.load_state_dict(snap["encoder"])
    state.ema.load_state_dict(snap["ema"])
    state.opt_ebm.load_state_dict(snap["opt_ebm"])
    state.opt_enc.load_state_dict(snap["opt_enc"])
    state.buffer.states = snap["buffer"]
    state.iteration = snap["iteration"]


def train_step(state: TrainState, x: torch.Tensor, loss_weights=(1.0, 1.0)) -> dict:
    """Run one joint update on the real batch ``x``.

    Order: SGLD negatives, stop-gradient latents, both losses, both optimizer
    steps, EMA update. On a non-finite loss or chain the state is rolled back
    and :class:`TrainingDiverged` is raised.

    Args:
        loss_weights: multipliers on ``(L_EBM, L_LE)``; only used to isolate
            the two updates in tests.
    """
    cfg = state.config
    if x.shape[0] != cfg.train.batch_size:
        raise ConfigError(f"batch of {x.shape[0]} != train.batch_size {cfg.train.batch_size}")
    snap = _snapshot(state)
    try:
        return _step(state, x, loss_weights)
    except (TrainingDiverged, ChainDiverged, FloatingPointError) as err:
        _restore(state, snap)
        raise TrainingDiverged(f"iteration {snap['iteration'] + 1}: {err}") from err


def _step(state: TrainState, x: torch.Tensor, loss_weights) -> dict:
    cfg = state.config
    it = state.iteration + 1
    lr = warmup_lr(cfg.ebm_opt.lr, it, cfg.train.warmup_iters)
    for group in state.opt_ebm.param_groups:
        group["lr"] = lr
    n = x.shape[0]
    rng_aug, rng_sgld = state.rngs["aug"], state.rngs["sgld"]

    x_fake, fresh = sample_batch(state.ebm, state.buffer, n, cfg.sgld, state.sgld_policy, rng_sgld,
                                 state.init_sampler)
    with torch.no_grad():
        z = direction(state.encoder(state.enc_policy(x, rng_aug)))
        z_fake = state.ebm.mode_latent(x_fake)
    views = (state.enc_policy(x, rng_aug), state.enc_policy(x, rng_aug))
    batch = TrainBatch(x, z, x_fake, z_fake, views)

    loss_e, e_real, e_fake = ebm_loss(batch, state.ebm, cfg.loss, return_parts=True)
    loss_h = encoder_loss(batch, state.encoder, cfg.loss)
    if not (torch.isfinite(loss_e) and torch.isfinite(loss_h)):
        raise TrainingDiverged("non-finite loss")
    state.opt_ebm.zero_grad(set_to_none=True)
    state.opt_enc.zero_grad(set_to_none=True)
    (loss_weights[0] * loss_e + loss_weights[1] * loss_h).backward()
    state.opt_ebm.step()
    state.opt_enc.step()
    update_ema(state.ema, state.ebm, cfg.train.ema_decay)
    state.iteration = it
    return {
        "iter": it,
        "loss_ebm": loss_e.item(),
        "loss_le": loss_h.item(),
        "energy_real_mean": float(e_real.mean()),
        "energy_fake_mean": float(e_fake.mean()),
        "buffer_size": len(state.buffer),
        "fresh_starts": fresh,
        "lr_ebm": lr,
    }


# -- checkpoints ------------------------------------------------------------------------

def _optimizer_arrays(opt, prefix):
    out = {}
    for i, st in opt.state_dict()["state"].items():
        for k, v in st.items():
            if v is None:
                continue
            out[f"{prefix}/{i}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    return out


def _load_optimizer(opt, arrays, prefix):
    sd = opt.state_dict()
    state = {}
    for name, a in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, i, k = name.split("/")
        t = torch.from_numpy(a.copy())
        state.setdefault(int(i), {})[k] = t
    sd["state"] = state
    opt.load_state_dict(sd)


def _rng_state(state: TrainState) -> dict:
    return {"rngs": {k: g.bit_generator.state for k, g in state.rngs.items()}, "source": state.source.state(),
            "iteration": state.iteration}


def model_meta(ebm: EnergyModel, cfg: RunConfig, iteration: int) -> dict:
    return {"variant": ebm.variant, "projector": ebm.projector.kind, "d_z": ebm.d_z, "beta": repr(ebm.beta),
            "dataset": cfg.dataset, "iteration": iteration}


def save_checkpoint(state: TrainState, directory) -> Path:
    """Write config snapshot, parameters, optimizer state, buffer and rng state to ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_snapshot(state.config, d / "config.txt")
    params = {**ckpt.module_arrays(state.ebm, "ebm"), **ckpt.module_arrays(state.encoder, "encoder"),
              **ckpt.module_arrays(state.ema, "ema")}
    ckpt.save_container(d / "params", params, model_meta(state.ebm, state.config, state.iteration))
    ckpt.save_container(d / "optim", {**_optimizer_arrays(state.opt_ebm, "ebm"),
                                      **_optimizer_arrays(state.opt_enc, "encoder")})
    buf = {} if state.buffer.states is None else {"states": state.buffer.states.numpy()}
    ckpt.save_container(d / "buffer", buf, {"capacity": state.buffer.capacity,
                                           "reinit_prob": repr(state.buffer.reinit_prob)})
    (d / "rng_state.json").write_text(json.dumps(_rng_state(state), sort_keys=True))
    return d


def load_checkpoint(directory, data=None, config: RunConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState` that continues bit-exactly from ``directory``.

    ``config`` replaces the stored snapshot, e.g. to extend ``train.total_iters``;
    it must describe the same architecture.
    """
    d = Path(directory)
    if not (d / "config.txt").exists():
        raise DataError(f"{d} is not a checkpoint directory")
    cfg = config if config is not None else loads((d / "config.txt").read_text())
    state = init_state(cfg, data)
    arrays, meta = ckpt.load_container(d / "params")
    ckpt.load_module_arrays(state.ebm, arrays, "ebm")
    ckpt.load_module_arrays(state.encoder, arrays, "encoder")
    ckpt.load_module_arrays(state.ema, arrays, "ema")
    opt_arrays, _ = ckpt.load_container(d / "optim")
    _load_optimizer(state.opt_ebm, opt_arrays, "ebm")
    _load_optimizer(state.opt_enc, opt_arrays, "encoder")
    buf, _ = ckpt.load_container(d / "buffer")
    if "states" in buf:
        state.buffer.states = torch.from_numpy(buf["states"])
    rs = json.loads((d / "rng_state.json").read_text())
    for k, g in state.rngs.items():
        g.bit_generator.state = rs["rngs"][k]
    state.source.load_state(rs["source"])
    state.iteration = int(rs["iteration"])
    return state


def save_models(ebm: EnergyModel, encoder, cfg: RunConfig, path, iteration: int = 0) -> Path:
    """Standalone evaluation checkpoint: energy model and encoder in one container."""
    path = Path(path)
    write_snapshot(cfg, path.with_suffix(".config.txt"))
    return ckpt.save_container(path, {**ckpt.module_arrays(ebm, "ebm"), **ckpt.module_arrays(encoder, "encoder")},
                               model_meta(ebm, cfg, iteration))


def load_models(path, use_ema: bool = True):
    """Load ``(ebm, encoder, cfg)`` from a checkpoint directory or a standalone container.

    A training output directory is also accepted: its ``ema_final`` container
    is used, or ``checkpoints/final`` when ``use_ema`` is false.
    """
    p = Path(path)
    if p.is_dir() and not (p / "params.manifest").exists():
        if use_ema and (p / "ema_final.manifest").exists():
            p = p / "ema_final"
        elif (p / "checkpoints" / "final").is_dir():
            p = p / "checkpoints" / "final"
    if p.is_dir():
        cfg = loads((p / "config.txt").read_text())
        arrays, _ = ckpt.load_container(p / "params")
        prefix = "ema" if use_ema else "ebm"
    else:
        stem = ckpt._stem(p)
        cfg_path = stem.with_suffix(".config.txt")
        if not cfg_path.exists():
            raise DataError(f"missing config snapshot {cfg_path}")
        cfg = loads(cfg_path.read_text())
        arrays, _ = ckpt.load_container(stem)
        prefix = "ebm"
    spec = get_spec(cfg.dataset)
    ebm, encoder = build_models(cfg, spec)
    ckpt.load_module_arrays(ebm, arrays, prefix)
    ckpt.load_module_arrays(encoder, arrays, "encoder")
    ebm.eval()
    encoder.eval()
    return ebm, encoder, cfg


# -- orchestration ----------------------------------------------------------------------

def _open_metrics(path: Path, resume_iter: int):
    rows = []
    if resume_iter > 0 and path.exists():
        with path.open(newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["iter"]) <= resume_iter]
    fh = path.open("w", newline="")
    w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
    w.writeheader()
    w.writerows(rows)
    return fh, w


def train(cfg: RunConfig | None = None, outdir=None, data=None, resume=None, state: TrainState | None = None,
          progress_every: int = 0) -> TrainState:
    """Run ``cfg.train.total_iters`` iterations.

    Args:
        cfg: run configuration; when resuming, ``None`` means the checkpoint's own snapshot.
        outdir: artifact directory; ``None`` keeps everything in memory.
        data: optional array of training samples overriding the dataset generator.
        resume: checkpoint directory to continue from.
        state: an existing state to continue in memory.
        progress_every: log a progress line every this many iterations.

    Raises:
        TrainingDiverged: after ``train.max_retries`` consecutive failed steps.
    """
    if resume is not None:
        state = load_checkpoint(resume, data, cfg)
    elif state is None:
        state = init_state(cfg, data)
    cfg = state.config
    out = Path(outdir) if outdir is not None else None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_snapshot(cfg, out / "config.txt")
        fh, writer = _open_metrics(out / "metrics.csv", state.iteration)
        if state.iteration == 0:
            save_checkpoint(state, out / "checkpoints" / "iter_0000000")
    t0 = time.perf_counter()
    try:
        while state.iteration < cfg.train.total_iters:
            x = state.source.next_batch(cfg.train.batch_size, state.rngs["data"])
            failures = 0
            while True:
                try:
                    rec = train_step(state, x)
                    break
                except TrainingDiverged as err:
                    failures += 1
                    log.warning("rolled back: %s", err)
                    if failures >= cfg.train.max_retries:
                        raise TrainingDiverged(
                            f"{failures} consecutive failures at iteration {state.iteration + 1}; "
                            f"last error: {err}; buffer size {len(state.buffer)}") from err
            rec["wall_time_s"] = round(time.perf_counter() - t0, 3)
            state.history.append(rec)
            if writer is not None:
                writer.writerow(rec)
            if progress_every and state.iteration % progress_every == 0:
                log.info("iter %d loss_ebm %.4f loss_le %.4f E_real %.4f E_fake %.4f", rec["iter"], rec["loss_ebm"],
                         rec["loss_le"], rec["energy_real_mean"], rec["energy_fake_mean"])
            if out is not None and cfg.train.checkpoint_every and state.iteration % cfg.train.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(state, out / "checkpoints" / f"iter_{state.iteration:07d}")
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoints" / "final")
        save_models(state.ema, state.encoder, cfg, out / "ema_final", state.iteration)
    return state
