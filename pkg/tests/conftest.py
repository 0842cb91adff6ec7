import numpy as np
import pytest
import torch
import torch.nn as nn

from clel.energy_model import EnergyModel


class Const(nn.Module):
    """Feature net returning a fixed vector for every input."""

    def __init__(self, value):
        super().__init__()
        self.value = torch.as_tensor(value, dtype=torch.float64)

    def forward(self, x):
        return self.value.expand(x.shape[0], -1).clone()


def fixed_feature_model(f, beta=0.01, projector="identity", **kw):
    f = torch.as_tensor(f, dtype=torch.float64)
    return EnergyModel((2,), d_z=len(f), beta=beta, projector=projector, feature_net=Const(f), **kw).double()


def identity_model(d=2, beta=0.01, projector="identity", **kw):
    """Model whose feature map is the identity on R^d."""
    return EnergyModel((d,), d_z=d, beta=beta, projector=projector, feature_net=nn.Identity(), **kw).double()


def unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    torch.manual_seed(0)
    return EnergyModel((2,), d_z=8, beta=0.3, hidden=(16, 16)).double().eval()


def tiny_config(**overrides):
    """A RunConfig small enough to train for a handful of steps in a unit test."""
    from clel.config import load_config

    base = {
        "model.d_z": "8", "model.hidden": "16,16", "encoder.hidden": "16,16",
        "train.batch_size": "8", "train.total_iters": "6", "train.warmup_iters": "2",
        "train.checkpoint_every": "3", "sgld.step_count": "4", "sgld.aug_period": "4",
        "sgld.eval_step_count": "10", "buffer.capacity": "40",
    }
    base.update({k: str(v) for k, v in overrides.items()})
    return load_config(None, [f"{k} = {v}" for k, v in base.items()])


# -- acceptance reporting ------------------------------------------------------------

ACCEPTANCE_TITLES = {
    1: "gradient correctness",
    2: "SGLD Gaussian oracle",
    3: "marginal constancy",
    4: "stop-gradient contract",
    5: "NT-Xent closed forms",
    6: "toy generation quality",
    7: "beta ablation trend",
    8: "projector ablation trend",
    9: "OOD AUROC",
    10: "conditional sampling",
    11: "norm flexibility",
    12: "multi-head instability trend",
    13: "reproducibility",
}
ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record(number, passed, detail)`` stores one acceptance verdict for the summary."""

    def _record(number, passed, detail=""):
        ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in ACCEPTANCE_TITLES.items():
        if number in ACCEPTANCE:
            passed, detail = ACCEPTANCE[number]
            verdict = "PASS" if passed else "FAIL"
        else:
            verdict, detail = "NOT RUN", "no verdict recorded (deselected or errored)"
        terminalreporter.write_line(f"criterion {number:2d} {verdict:7s} {title}: {detail}")
