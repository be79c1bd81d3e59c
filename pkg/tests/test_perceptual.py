import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jcdp.perceptual import (
    distance_gradient,
    load_extractor,
    perceptual_distance,
    rotation_accuracy,
    save_extractor,
    train_extractor,
)
from tests.helpers import unit_images


@pytest.fixture(scope="module")
def phi64(tiny_phi):
    return tiny_phi.double()


def test_zero_steps_extractor_is_usable(small_bench):
    phi = train_extractor(small_bench["surrogate"], steps=0, seed=1, width=8)
    a, b = unit_images(3, 0), unit_images(3, 1)
    d = perceptual_distance(phi, a, b)
    assert d.shape == (3,) and torch.isfinite(d).all() and (d > 0).all()


def test_training_deterministic(small_bench):
    a = train_extractor(small_bench["surrogate"], steps=5, seed=2, width=8)
    b = train_extractor(small_bench["surrogate"], steps=5, seed=2, width=8)
    assert all(torch.equal(a.parameters()[k], b.parameters()[k]) for k in a.parameters())
    assert a.history == b.history


def test_label_mode_and_errors(small_bench):
    phi = train_extractor(small_bench["surrogate"], "labels", steps=2, seed=0, width=8)
    assert phi.labeling == "labels"
    with pytest.raises(ValueError):
        train_extractor(small_bench["surrogate"], "colour", steps=1)


def test_rotation_accuracy_in_range(tiny_phi, small_bench):
    acc = rotation_accuracy(tiny_phi, small_bench["test"])
    assert 0.0 <= acc <= 1.0


def test_identical_inputs_zero(tiny_phi):
    a = unit_images(4, 2)
    assert torch.equal(perceptual_distance(tiny_phi, a, a.clone()), torch.zeros(4))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_symmetric_and_nonnegative(tiny_phi, seed):
    a, b = unit_images(2, seed), unit_images(2, seed + 1)
    d_ab = perceptual_distance(tiny_phi, a, b)
    d_ba = perceptual_distance(tiny_phi, b, a)
    assert (d_ab >= 0).all()
    assert torch.allclose(d_ab, d_ba, rtol=1e-6, atol=1e-7)


def test_elements_independent(tiny_phi):
    a, b = unit_images(4, 3), unit_images(4, 4)
    full = perceptual_distance(tiny_phi, a, b)
    single = torch.cat([perceptual_distance(tiny_phi, a[i:i + 1], b[i:i + 1]) for i in range(4)])
    assert torch.allclose(full, single, rtol=1e-5, atol=1e-6)


def test_shape_mismatch(tiny_phi):
    with pytest.raises(ValueError):
        perceptual_distance(tiny_phi, unit_images(1, 0), unit_images(2, 0))
    with pytest.raises(ValueError):
        distance_gradient(tiny_phi, unit_images(1, 0), unit_images(2, 0))


def test_gradient_zero_at_identity(tiny_phi):
    a = unit_images(3, 5)
    g = distance_gradient(tiny_phi, a, a.clone())
    assert g.shape == a.shape
    assert torch.equal(g, torch.zeros_like(a))


def _probe_pairs(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand((2, 3, 4, 4), generator=g, dtype=torch.float64) * 2 - 1
    b = torch.rand((2, 3, 4, 4), generator=g, dtype=torch.float64) * 2 - 1
    return a, b


def test_gradient_matches_central_differences_on_probes(phi64):
    a, b = _probe_pairs(0)
    grad = distance_gradient(phi64, a, b)
    h = 1e-3
    fd = torch.zeros_like(a)
    flat_a, flat_fd = a.view(-1), fd.view(-1)
    for i in range(flat_a.numel()):
        orig = flat_a[i].item()
        flat_a[i] = orig + h
        up = perceptual_distance(phi64, a, b).sum().item()
        flat_a[i] = orig - h
        down = perceptual_distance(phi64, a, b).sum().item()
        flat_a[i] = orig
        flat_fd[i] = (up - down) / (2 * h)
    rel = (grad - fd).norm() / fd.norm()
    assert rel < 1e-2


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_directional_derivative(phi64, seed):
    a, b = _probe_pairs(seed)
    u = torch.randn(a.shape, generator=torch.Generator().manual_seed(seed + 100),
                    dtype=torch.float64)
    h = 1e-4
    grad = distance_gradient(phi64, a, b)
    for i in range(a.shape[0]):
        up = perceptual_distance(phi64, a + h * u, b)[i]
        down = perceptual_distance(phi64, a - h * u, b)[i]
        fd = ((up - down) / (2 * h)).item()
        an = (grad[i] * u[i]).sum().item()
        assert abs(fd - an) <= 1e-2 * max(abs(fd), abs(an))


def test_parameters_frozen_by_use(tiny_phi):
    before = tiny_phi.parameters()
    a, b = unit_images(2, 0), unit_images(2, 1)
    distance_gradient(tiny_phi, a, b)
    after = tiny_phi.parameters()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert not any(p.requires_grad for p in tiny_phi.net.parameters())


def test_save_load_round_trip(tiny_phi, tmp_path):
    save_extractor(tiny_phi, tmp_path / "phi")
    back = load_extractor(tmp_path / "phi")
    a, b = unit_images(3, 0), unit_images(3, 1)
    assert torch.equal(perceptual_distance(back, a, b), perceptual_distance(tiny_phi, a, b))
    assert back.tap_layers == tiny_phi.tap_layers
