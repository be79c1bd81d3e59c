import numpy as np
import pytest
import torch

from jcdp.classify import ClassifierSpec
from jcdp.data import LabeledImages
from jcdp.forge import (
    L2_1,
    LINF_8,
    BudgetViolation,
    PerturbationBudget,
    apply_budget,
    forge,
    forge_emn,
    forge_lsp,
    forge_random_class_patch,
    verify_budget,
)
from tests.helpers import linear_probe_accuracy

FAST_EMN = dict(outer_steps=2, inner_steps=3, train_batches=3,
                surrogate=ClassifierSpec(width=4, batch_size=32))


@pytest.fixture(scope="module")
def clean(small_bench):
    return small_bench["train"]


def test_standard_radii():
    assert LINF_8 == PerturbationBudget("l_inf", 8 / 255)
    assert L2_1 == PerturbationBudget("l2", 1.0)
    with pytest.raises(ValueError):
        PerturbationBudget("l1", 1.0)
    with pytest.raises(ValueError):
        PerturbationBudget("l2", -0.1)


@pytest.mark.parametrize("kind", ["emn_sample", "emn_class", "lsp", "random_class_patch"])
def test_every_forge_respects_budget_and_labels(clean, kind):
    kw = FAST_EMN if kind.startswith("emn") else {}
    ue = forge(clean, kind, seed=3, **kw)
    report = verify_budget(ue, clean)
    assert report.ok
    assert report.max_norm <= ue.budget.epsilon
    assert np.array_equal(ue.labels, clean.labels)
    assert ue.images.min() >= 0 and ue.images.max() <= 1
    assert ue.noise_kind == kind and ue.clean_ref == clean.content_id()
    assert ue.provenance[-1]["stage"] == "forge"
    assert ue.provenance[-1]["source_content_id"] == clean.content_id()


@pytest.mark.parametrize("kind", ["emn_sample", "emn_class", "lsp", "random_class_patch"])
def test_forge_is_reproducible(clean, kind):
    kw = FAST_EMN if kind.startswith("emn") else {}
    a = forge(clean, kind, seed=5, **kw)
    b = forge(clean, kind, seed=5, **kw)
    assert a.images.tobytes() == b.images.tobytes()


def test_emn_zero_budget_is_identity(clean):
    ue = forge_emn(clean, budget=PerturbationBudget("l_inf", 0.0), mode="class_wise", seed=0)
    assert np.array_equal(ue.images, clean.images)


def test_emn_linf_exact_bound(clean):
    ue = forge_emn(clean, mode="sample_wise", seed=1, **FAST_EMN)
    d = np.abs(ue.images.astype(np.float64) - clean.images.astype(np.float64))
    assert d.max() <= 8 / 255
    assert d.max() > 0


def test_emn_l2_budget(clean):
    ue = forge_emn(clean, budget=L2_1, mode="sample_wise", seed=1, **FAST_EMN)
    assert verify_budget(ue, clean).l2.max() <= 1.0


def test_emn_rejects_mode(clean):
    with pytest.raises(ValueError):
        forge_emn(clean, mode="pixel_wise")


def test_lsp_class_wise_identical_delta(clean):
    ue = forge_lsp(clean, seed=0)
    delta = ue.images.astype(np.float64) - clean.images.astype(np.float64)
    # pixels far from 0 and 1 are never clamped
    free = (clean.images > 0.3) & (clean.images < 0.7)
    for c in range(clean.num_classes):
        idx = np.flatnonzero(clean.labels == c)[:2]
        both = free[idx[0]] & free[idx[1]]
        np.testing.assert_allclose(delta[idx[0]][both], delta[idx[1]][both], atol=1e-6)


def test_lsp_l2_norm_is_budget_up_to_clamping(clean):
    ue = forge_lsp(clean, seed=0)
    l2 = verify_budget(ue, clean).l2
    assert l2.max() <= 1.0
    assert l2.mean() > 0.9
    # identical mid-grey images are never clamped, so the norm is exactly the budget
    grey = LabeledImages(np.full((4, 3, 16, 16), 0.5), np.arange(4), class_names=list("abcd"))
    g = verify_budget(forge_lsp(grey, seed=0), grey).l2
    np.testing.assert_allclose(g, 1.0, atol=1e-5)


def test_lsp_patch_size_must_divide(clean):
    with pytest.raises(ValueError):
        forge_lsp(clean, patch_size=5)


def test_lsp_noise_linearly_separable(clean):
    ue = forge_lsp(clean, seed=0)
    delta = ue.images.astype(np.float64) - clean.images.astype(np.float64)
    assert linear_probe_accuracy(delta, clean.labels, clean.num_classes) >= 0.95


def test_random_patch_class_wise(clean):
    ue = forge_random_class_patch(clean, seed=2)
    delta = ue.images.astype(np.float64) - clean.images.astype(np.float64)
    free = (clean.images > 0.1) & (clean.images < 0.9)
    for c in range(clean.num_classes):
        i, j = np.flatnonzero(clean.labels == c)[:2]
        both = free[i] & free[j]
        np.testing.assert_allclose(delta[i][both], delta[j][both], atol=1e-6)
        np.testing.assert_allclose(np.abs(delta[i][both]), 8 / 255, atol=1e-6)


def test_verify_self_is_zero(clean):
    r = verify_budget(clean, clean, LINF_8)
    assert r.ok and not r.linf.any() and not r.l2.any()


def test_verify_names_corrupted_sample(clean):
    ue = forge_random_class_patch(clean, seed=0)
    bad = ue.images.copy()
    bad[7, 0, 3, 3] = np.clip(clean.images[7, 0, 3, 3] + 0.2, 0, 1) if \
        clean.images[7, 0, 3, 3] < 0.5 else clean.images[7, 0, 3, 3] - 0.2
    corrupted = ue.with_images(bad)
    report = verify_budget(corrupted, clean, LINF_8)
    assert report.violators == [7]
    with pytest.raises(BudgetViolation) as info:
        verify_budget(corrupted, clean, LINF_8, strict=True)
    assert info.value.violators == [7]


def test_verify_rejects_misaligned(clean):
    with pytest.raises(ValueError):
        verify_budget(clean.subset(slice(0, 5)), clean, LINF_8)
    shuffled = clean.subset(np.roll(np.arange(len(clean)), 1))
    with pytest.raises(ValueError):
        verify_budget(shuffled, clean, LINF_8)


def test_apply_budget_exact_after_float32_rounding(rng):
    clean = rng.uniform(0, 1, (64, 3, 8, 8)).astype(np.float32)
    delta = rng.choice([-1.0, 1.0], clean.shape) * (8 / 255)
    adv = apply_budget(clean, delta, LINF_8)
    assert (np.abs(adv.astype(np.float64) - clean.astype(np.float64)) <= 8 / 255).all()
    big = rng.standard_normal(clean.shape) * 3
    adv2 = apply_budget(clean, big, L2_1)
    l2 = np.sqrt(((adv2.astype(np.float64) - clean) ** 2).reshape(64, -1).sum(1))
    assert (l2 <= 1.0).all()
