import json

import numpy as np
import pytest
import torch

from jcdp.container import ContainerError
from jcdp.data import LabeledImages
from jcdp.denoiser import (
    finetune_ddpm,
    load_checkpoint,
    predict_noise,
    save_checkpoint,
    train_ddpm,
    training_loss,
)
from jcdp.schedule import desk_schedule


def _same_params(a, b):
    return all(torch.equal(a[k], b[k]) for k in a) and a.keys() == b.keys()


def test_zero_steps_keeps_initialization(small_bench, tiny_spec):
    state = train_ddpm(small_bench["surrogate"], tiny_spec, desk_schedule(20), steps=0, seed=3)
    init = tiny_spec.build(3).state_dict()
    assert _same_params(state.parameters, init)
    assert state.step == 0 and state.loss_history == []


def test_single_image_loss_decreases(small_bench, tiny_spec):
    one = small_bench["surrogate"].subset([0] * 32)
    state = train_ddpm(one, tiny_spec, desk_schedule(20), steps=120, batch_size=16, seed=0,
                       lr=2e-3, log_every=20)
    losses = [v for _, v in state.loss_history]
    assert losses[-1] < losses[0]


def test_training_is_reproducible(small_bench, tiny_spec):
    kw = dict(steps=12, batch_size=8, seed=5, lr=1e-3, log_every=4)
    a = train_ddpm(small_bench["surrogate"], tiny_spec, desk_schedule(20), **kw)
    b = train_ddpm(small_bench["surrogate"], tiny_spec, desk_schedule(20), **kw)
    assert a.loss_history == b.loss_history
    assert _same_params(a.parameters, b.parameters)


def test_rejects_mismatched_data(tiny_spec):
    bad = LabeledImages(np.zeros((4, 3, 8, 8)), np.zeros(4))
    with pytest.raises(ValueError):
        train_ddpm(bad, tiny_spec, desk_schedule(20), steps=1)
    with pytest.raises(ValueError):
        train_ddpm(bad.subset(slice(0, 0)), tiny_spec, desk_schedule(20), steps=1)


def test_finetune_zero_steps_equals_source(tiny_state, small_bench):
    ft = finetune_ddpm(tiny_state, small_bench["train"], steps=0, seed=9)
    assert _same_params(ft.parameters, tiny_state.parameters)
    assert ft.source == tiny_state.trained_on


def test_finetune_zero_lr_leaves_parameters(tiny_state, small_bench):
    ft = finetune_ddpm(tiny_state, small_bench["train"], steps=5, lr_scale=0.0, seed=9,
                       batch_size=8)
    assert ft.step == 5
    assert _same_params(ft.parameters, tiny_state.parameters)


def test_finetune_moves_parameters(tiny_state, small_bench):
    ft = finetune_ddpm(tiny_state, small_bench["train"], steps=3, seed=9, batch_size=8)
    assert not _same_params(ft.parameters, tiny_state.parameters)


def test_predict_noise_deterministic_and_shaped(tiny_state):
    g = torch.Generator().manual_seed(0)
    for n in (1, 8):
        x = torch.randn((n, 3, 16, 16), generator=g)
        a = predict_noise(tiny_state, x, 7)
        b = predict_noise(tiny_state, x, 7)
        assert a.shape == x.shape
        assert torch.equal(a, b)


def test_untrained_output_bounded(small_bench, tiny_spec):
    state = train_ddpm(small_bench["surrogate"], tiny_spec, desk_schedule(20), steps=0, seed=1)
    out = predict_noise(state, torch.randn(4, 3, 16, 16), 10)
    assert torch.isfinite(out).all() and out.abs().max() < 1e3


def test_predict_noise_input_checks(tiny_state):
    with pytest.raises(ValueError):
        predict_noise(tiny_state, torch.zeros(1, 1, 16, 16), 1)
    with pytest.raises(ValueError):
        predict_noise(tiny_state, torch.zeros(1, 3, 16, 16), 0)
    with pytest.raises(ValueError):
        predict_noise(tiny_state, torch.full((1, 3, 16, 16), float("nan")), 1)


def test_checkpoint_round_trip_bit_identical(tiny_state, tmp_path):
    save_checkpoint(tiny_state, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    x = torch.randn(4, 3, 16, 16)
    assert torch.equal(predict_noise(back, x, 5), predict_noise(tiny_state, x, 5))
    assert back.loss_history == tiny_state.loss_history
    assert back.schedule.params() == tiny_state.schedule.params()
    assert back.step == tiny_state.step


def test_finetune_from_reloaded_checkpoint_matches(tiny_state, small_bench, tmp_path):
    save_checkpoint(tiny_state, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    a = finetune_ddpm(tiny_state, small_bench["train"], steps=2, seed=1, batch_size=8)
    b = finetune_ddpm(back, small_bench["train"], steps=2, seed=1, batch_size=8)
    assert _same_params(a.parameters, b.parameters)


def test_checkpoint_version_rejected(tiny_state, tmp_path):
    save_checkpoint(tiny_state, tmp_path / "ck")
    path = tmp_path / "ck" / "manifest.json"
    m = json.loads(path.read_text())
    m["format_version"] = 2
    path.write_text(json.dumps(m))
    with pytest.raises(ContainerError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_loss_gradient_matches_finite_differences(tiny_spec):
    torch.manual_seed(0)
    model = tiny_spec.build(0).double()
    sched = desk_schedule(20)
    g = torch.Generator().manual_seed(1)
    x0 = torch.rand((4, 3, 16, 16), generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    t = torch.tensor([1, 5, 12, 20])
    params = dict(model.named_parameters())
    loss = training_loss(model, x0, t, eps, sched)
    grads = torch.autograd.grad(loss, list(params.values()))
    grad_of = dict(zip(params, grads))
    h = 1e-5
    checked = 0
    for name in ("inp.weight", "mid.conv1.weight", "time_mlp.0.weight", "out.weight"):
        if name not in params:
            continue
        p = params[name]
        flat = p.data.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 5))[:5]:
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = training_loss(model, x0, t, eps, sched).item()
                flat[idx] = orig - h
                down = training_loss(model, x0, t, eps, sched).item()
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            an = grad_of[name].view(-1)[idx].item()
            assert abs(fd - an) <= 1e-2 * max(abs(fd), abs(an), 1e-8)
            checked += 1
    assert checked >= 15
