import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from clel.energy_model import EnergyModel, direction
from clel.errors import ConfigError, DegenerateFeature
from clel.latent_encoder import (IdentityPolicy, ImagePolicy, JitterRotatePolicy, LatentEncoder, mode_latent,
                                 sample_latent)


@pytest.fixture
def enc():
    torch.manual_seed(0)
    return LatentEncoder((2,), d_z=16, hidden=(32, 32)).double()


def test_encode_deterministic_and_batched(enc):
    x = torch.randn(9, 2, dtype=torch.float64)
    full = enc(x)
    assert torch.equal(full, enc(x))
    singles = torch.cat([enc(x[i : i + 1]) for i in range(9)])
    assert torch.allclose(full, singles, atol=1e-14)
    with pytest.raises(ConfigError):
        enc(torch.zeros(2, 3, dtype=torch.float64))


def _silu(a):
    return a / (1 + np.exp(-a))


def test_encoder_matches_matrix_arithmetic(enc):
    # numpy forward pass from the state dict: backbone linear layers, then act + head
    sd = {k: v.numpy() for k, v in enc.state_dict().items()}
    x = np.random.default_rng(0).standard_normal((5, 2))
    h = _silu(x @ sd["backbone.0.weight"].T + sd["backbone.0.bias"])
    h = h @ sd["backbone.2.weight"].T + sd["backbone.2.bias"]
    h = _silu(h)
    h = _silu(h @ sd["head.1.0.weight"].T + sd["head.1.0.bias"])
    h = h @ sd["head.1.2.weight"].T + sd["head.1.2.bias"]
    assert np.allclose(enc(torch.tensor(x)).detach().numpy(), h, atol=1e-12)


def test_sample_latent_one_layer_oracle():
    lin = nn.Linear(2, 3, bias=False).double()
    w = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]])
    with torch.no_grad():
        lin.weight.copy_(torch.tensor(w))
    x = np.array([[0.5, -1.0]])
    expect = x @ w.T
    expect /= np.linalg.norm(expect)
    got = sample_latent(lin, IdentityPolicy(), torch.tensor(x), np.random.default_rng(0))
    assert np.allclose(got.detach().numpy(), expect, atol=1e-15)


def test_identity_policy_latent(enc):
    x = torch.randn(4, 2, dtype=torch.float64)
    a = sample_latent(enc, IdentityPolicy(), x, np.random.default_rng(0))
    b = sample_latent(enc, IdentityPolicy(), x, np.random.default_rng(99))
    assert torch.equal(a, b)
    assert torch.equal(a, direction(enc(x)))


def test_stochastic_policy(enc):
    x = torch.randn(4, 2, dtype=torch.float64)
    pol = JitterRotatePolicy()
    a = sample_latent(enc, pol, x, np.random.default_rng(0))
    b = sample_latent(enc, pol, x, np.random.default_rng(1))
    c = sample_latent(enc, pol, x, np.random.default_rng(0))
    assert not torch.equal(a, b)
    assert torch.equal(a, c)
    assert np.allclose(a.norm(dim=1).detach().numpy(), 1, atol=1e-6)


def test_degenerate_encoder_output():
    zero = nn.Linear(2, 3).double()
    nn.init.zeros_(zero.weight)
    nn.init.zeros_(zero.bias)
    with pytest.raises(DegenerateFeature):
        sample_latent(zero, None, torch.ones(1, 2, dtype=torch.float64), np.random.default_rng(0))


def test_mode_latent_matches_model():
    torch.manual_seed(1)
    m = EnergyModel((2,), d_z=8, hidden=(8,)).double().eval()
    x = torch.randn(5, 2, dtype=torch.float64)
    z = mode_latent(m, x)
    assert torch.equal(z, m.project_direction(direction(m.features(x))))
    assert np.allclose(z.norm(dim=1).detach().numpy(), 1, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0))
def test_vector_policy_closure(seed, strength):
    g = np.random.default_rng(seed)
    pol = JitterRotatePolicy(bounds=(-3.0, 3.0)).scaled(strength)
    x = torch.tensor(g.uniform(-3, 3, (16, 2)))
    out = pol(x, g)
    assert out.shape == x.shape and torch.isfinite(out).all()
    assert out.abs().max() <= 3.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_image_policy_closure(seed):
    g = np.random.default_rng(seed)
    x = torch.tensor(g.uniform(-1, 1, (3, 1, 28, 28)), dtype=torch.float32)
    out = ImagePolicy()(x, g)
    assert out.shape == x.shape
    assert out.min() >= -1 and out.max() <= 1


def test_rotation_preserves_center_distance():
    pol = JitterRotatePolicy(jitter=0.0, max_degrees=45, center=(1.0, -1.0))
    x = torch.tensor([[2.0, 0.5], [-1.0, 3.0]], dtype=torch.float64)
    out = pol(x, np.random.default_rng(0))
    c = torch.tensor([1.0, -1.0], dtype=torch.float64)
    assert torch.allclose((out - c).norm(dim=1), (x - c).norm(dim=1), atol=1e-12)


def test_image_encoder_shapes():
    torch.manual_seed(0)
    e = LatentEncoder((1, 28, 28), d_z=16)
    out = e(torch.zeros(2, 1, 28, 28))
    assert out.shape == (2, 16)
