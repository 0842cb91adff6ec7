import csv
import filecmp
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from clel.errors import ConfigError, TrainingDiverged
from clel.trainer import (METRIC_COLUMNS, init_state, load_checkpoint, load_models, save_checkpoint, train,
                          train_step, update_ema, warmup_lr)

from conftest import tiny_config


def test_warmup_lr():
    assert warmup_lr(1e-4, 0, 2000) == 0.0
    assert warmup_lr(1e-4, 2000, 2000) == 1e-4
    assert warmup_lr(1e-4, 1000, 2000) == pytest.approx(5e-5, abs=1e-20)
    assert warmup_lr(1e-4, 5000, 2000) == 1e-4


def test_update_ema_examples():
    s, l = {"w": torch.zeros(3)}, {"w": torch.ones(3)}
    update_ema(s, l, 0.999)
    assert torch.allclose(s["w"], torch.full((3,), 0.001), atol=1e-9)
    s = {"w": torch.tensor([2.0])}
    update_ema(s, {"w": torch.tensor([5.0])}, 0.0)
    assert s["w"].item() == 5.0
    update_ema(s, {"w": torch.tensor([9.0])}, 1.0)
    assert s["w"].item() == 5.0
    with pytest.raises(ConfigError):
        update_ema({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0.5)
    with pytest.raises(ConfigError):
        update_ema({"w": torch.zeros(2)}, {"v": torch.zeros(2)}, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(0.0, 1.0))
def test_ema_stays_in_envelope(values, decay):
    shadow = {"w": torch.tensor([values[0]], dtype=torch.float64)}
    seen = [values[0]]
    for v in values[1:]:
        seen.append(v)
        update_ema(shadow, {"w": torch.tensor([v], dtype=torch.float64)}, decay)
        assert min(seen) - 1e-9 <= shadow["w"].item() <= max(seen) + 1e-9


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def _batch(state, seed=0):
    return state.source.next_batch(state.config.train.batch_size, np.random.default_rng(seed))


def test_zero_learning_rates_freeze_parameters():
    state = init_state(tiny_config(**{"ebm_opt.lr": 0.0, "enc_opt.lr": 0.0}))
    before_e, before_h = _params(state.ebm), _params(state.encoder)
    rec = train_step(state, _batch(state))
    assert _same(before_e, _params(state.ebm)) and _same(before_h, _params(state.encoder))
    assert set(rec) >= set(METRIC_COLUMNS) - {"wall_time_s"}
    assert rec["buffer_size"] == 8 and rec["fresh_starts"] == 8


def test_batch_size_checked():
    state = init_state(tiny_config())
    with pytest.raises(ConfigError):
        train_step(state, torch.zeros(3, 2))


def test_step_determinism():
    runs = []
    for _ in range(2):
        state = init_state(tiny_config())
        for i in range(10):
            train_step(state, _batch(state, i))
        runs.append(_params(state.ebm) + _params(state.encoder) + _params(state.ema))
    assert _same(*runs)


@pytest.mark.parametrize("weights,moved", [((1.0, 0.0), "ebm"), ((0.0, 1.0), "encoder")])
def test_update_isolation(weights, moved):
    state = init_state(tiny_config(**{"enc_opt.weight_decay": 0.0}))
    e0, h0 = _params(state.ebm), _params(state.encoder)
    train_step(state, _batch(state), loss_weights=weights)
    e_same, h_same = _same(e0, _params(state.ebm)), _same(h0, _params(state.encoder))
    if moved == "ebm":
        assert not e_same and h_same
    else:
        assert e_same and not h_same


def test_divergence_rolls_back(monkeypatch):
    import clel.trainer as tr

    state = init_state(tiny_config())
    train_step(state, _batch(state))
    snap_params, snap_iter = _params(state.ebm), state.iteration
    snap_buf = state.buffer.states.clone()

    def bad_loss(*a, **k):
        raise TrainingDiverged("forced")

    monkeypatch.setattr(tr, "ebm_loss", bad_loss)
    with pytest.raises(TrainingDiverged):
        train_step(state, _batch(state))
    assert state.iteration == snap_iter
    assert _same(snap_params, _params(state.ebm))
    assert torch.equal(snap_buf, state.buffer.states)


def test_train_aborts_after_retries(monkeypatch, tmp_path):
    import clel.trainer as tr

    calls = []

    def bad_loss(*a, **k):
        calls.append(1)
        raise TrainingDiverged("forced")

    monkeypatch.setattr(tr, "ebm_loss", bad_loss)
    with pytest.raises(TrainingDiverged, match="3 consecutive"):
        train(tiny_config(), tmp_path / "run")
    assert len(calls) == 3


def test_zero_iterations(tmp_path):
    state = train(tiny_config(**{"train.total_iters": 0, "train.warmup_iters": 0}), tmp_path / "run")
    run = tmp_path / "run"
    assert state.iteration == 0
    assert (run / "config.txt").exists()
    assert (run / "checkpoints" / "iter_0000000" / "params.manifest").exists()
    rows = list(csv.reader((run / "metrics.csv").open()))
    assert rows == [list(METRIC_COLUMNS)]


def _metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_artifacts_and_clock(tmp_path):
    run = tmp_path / "run"
    train(tiny_config(), run)
    rows = _metrics(run / "metrics.csv")
    assert [int(r["iter"]) for r in rows] == list(range(1, 7))
    for name in ("iter_0000003", "iter_0000006", "final"):
        d = run / "checkpoints" / name
        for f in ("config.txt", "params.manifest", "params.bin", "optim.bin", "buffer.bin", "rng_state.json"):
            assert (d / f).exists(), (name, f)
    ebm, enc, cfg = load_models(run / "ema_final")
    assert cfg.model.d_z == 8 and ebm.d_z == 8


def _files(d):
    return sorted(p.relative_to(d) for p in Path(d).rglob("*") if p.is_file())


def test_resume_is_bit_exact(tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    train(tiny_config(), full)
    train(tiny_config(**{"train.total_iters": 3}), part)
    # continue the 3-iteration run to 6 with the same config as the full run
    train(tiny_config(), outdir=part, resume=part / "checkpoints" / "iter_0000003")
    for name in ("params", "optim", "buffer"):
        for ext in (".bin", ".manifest"):
            a = full / "checkpoints" / "final" / (name + ext)
            b = part / "checkpoints" / "final" / (name + ext)
            assert filecmp.cmp(a, b, shallow=False), name + ext
    fa, fb = _metrics(full / "metrics.csv"), _metrics(part / "metrics.csv")
    assert [r["iter"] for r in fb] == [r["iter"] for r in fa]
    for ra, rb in zip(fa, fb):
        for k in METRIC_COLUMNS[:-1]:
            assert ra[k] == rb[k]


def test_checkpoint_round_trip(tmp_path):
    state = init_state(tiny_config())
    for i in range(3):
        train_step(state, _batch(state, i))
    save_checkpoint(state, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert _same(_params(state.ebm), _params(back.ebm))
    assert _same(_params(state.ema), _params(back.ema))
    assert torch.equal(state.buffer.states, back.buffer.states)
    for (ka, a), (kb, b) in zip(state.ebm.named_buffers(), back.ebm.named_buffers()):
        assert ka == kb and torch.equal(a, b)
    save_checkpoint(back, tmp_path / "ck2")
    for f in ("params.bin", "optim.bin", "buffer.bin", "rng_state.json", "config.txt"):
        assert filecmp.cmp(tmp_path / "ck" / f, tmp_path / "ck2" / f, shallow=False), f


def test_ema_shadow_tracks_all_energy_parameters():
    state = init_state(tiny_config())
    assert [k for k, _ in state.ema.named_parameters()] == [k for k, _ in state.ebm.named_parameters()]
    assert any(k.startswith("projector") for k, _ in state.ema.named_parameters())
