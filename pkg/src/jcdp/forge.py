"""Unlearnable-dataset forging: error-minimizing, linearly separable and random shortcut noise.

Every forge path finishes through :func:`apply_budget`, which clips to the
image range and guarantees the float32 result satisfies the budget when the
difference is measured in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .classify import ClassifierSpec, build_classifier
from .data import LabeledImages, to_model_space

log = logging.getLogger(__name__)

NOISE_KINDS = ("emn_sample", "emn_class", "lsp", "random_class_patch")


@dataclass(frozen=True)
class PerturbationBudget:
    norm: str = "l_inf"
    epsilon: float = 8 / 255

    def __post_init__(self):
        if self.norm not in ("l_inf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")

    def to_dict(self) -> dict:
        return {"norm": self.norm, "epsilon": self.epsilon}


LINF_8 = PerturbationBudget("l_inf", 8 / 255)
L2_1 = PerturbationBudget("l2", 1.0)


@dataclass
class UEDataset(LabeledImages):
    noise_kind: str = "emn_sample"
    budget: PerturbationBudget = LINF_8
    seed: int = 0
    clean_ref: str | None = None


class BudgetViolation(AssertionError):
    def __init__(self, violators):
        self.violators = list(violators)
        super().__init__(f"{len(self.violators)} samples exceed budget: {self.violators[:20]}")


@dataclass
class BudgetReport:
    norm: str
    epsilon: float
    linf: np.ndarray
    l2: np.ndarray
    violators: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violators

    @property
    def max_norm(self) -> float:
        arr = self.linf if self.norm == "l_inf" else self.l2
        return float(arr.max()) if arr.size else 0.0

    def raise_for_violations(self) -> None:
        if self.violators:
            raise BudgetViolation(self.violators)


def _per_sample_l2(d: np.ndarray) -> np.ndarray:
    return np.sqrt((d.reshape(len(d), -1) ** 2).sum(axis=1))


def _project(delta: np.ndarray, budget: PerturbationBudget) -> np.ndarray:
    eps = budget.epsilon
    if budget.norm == "l_inf":
        return np.clip(delta, -eps, eps)
    norms = _per_sample_l2(delta)
    scale = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
    return delta * scale.reshape(-1, *([1] * (delta.ndim - 1)))


def apply_budget(clean: np.ndarray, delta: np.ndarray, budget: PerturbationBudget) -> np.ndarray:
    """Project ``delta`` into the budget, add, clip to [0, 1], return float32.

    float32 rounding is corrected so the emitted images satisfy the budget
    exactly when compared to ``clean`` in float64.
    """
    x = clean.astype(np.float64)
    eps = budget.epsilon
    d = _project(np.asarray(delta, dtype=np.float64), budget)
    adv = np.clip(x + d, 0.0, 1.0).astype(np.float32)
    if budget.norm == "l_inf":
        for _ in range(4):
            diff = adv.astype(np.float64) - x
            hi, lo = diff > eps, diff < -eps
            if not (hi.any() or lo.any()):
                break
            adv[hi] = np.nextafter(adv[hi], np.float32(-np.inf))
            adv[lo] = np.nextafter(adv[lo], np.float32(np.inf))
    else:
        shrink = 1.0
        for _ in range(20):
            over = _per_sample_l2(adv.astype(np.float64) - x) > eps
            if not over.any():
                break
            shrink *= 1 - 1e-6
            adv[over] = np.clip(x[over] + d[over] * shrink, 0.0, 1.0).astype(np.float32)
    return adv


def verify_budget(ue: LabeledImages, clean: LabeledImages, budget: PerturbationBudget | None = None,
                  strict: bool = False) -> BudgetReport:
    """Per-sample perturbation norms of ``ue`` against index-aligned ``clean``."""
    if budget is None:
        budget = getattr(ue, "budget", None)
        if budget is None:
            raise ValueError("no budget given and dataset carries none")
    if ue.images.shape != clean.images.shape:
        raise ValueError(f"misaligned pairing: {ue.images.shape} vs {clean.images.shape}")
    if not np.array_equal(ue.labels, clean.labels):
        raise ValueError("misaligned pairing: labels differ")
    d = ue.images.astype(np.float64) - clean.images.astype(np.float64)
    flat = d.reshape(len(d), -1)
    linf = np.abs(flat).max(axis=1) if flat.size else np.zeros(len(d))
    l2 = np.sqrt((flat ** 2).sum(axis=1))
    norms = linf if budget.norm == "l_inf" else l2
    report = BudgetReport(
        budget.norm, budget.epsilon, linf, l2,
        violators=[int(i) for i in np.flatnonzero(norms > budget.epsilon)],
    )
    if strict:
        report.raise_for_violations()
    return report


def _emit(clean: LabeledImages, images: np.ndarray, kind: str, budget, seed: int,
          extra: dict | None = None) -> UEDataset:
    entry = {
        "stage": "forge",
        "noise_kind": kind,
        "budget": budget.to_dict(),
        "seed": int(seed),
        "source": clean.name,
        "source_content_id": clean.content_id(),
    }
    if extra:
        entry.update(extra)
    ue = UEDataset(
        images=images,
        labels=clean.labels.copy(),
        name=f"{clean.name}-ue-{kind}",
        class_names=list(clean.class_names),
        provenance=list(clean.provenance) + [entry],
        noise_kind=kind,
        budget=budget,
        seed=int(seed),
        clean_ref=clean.content_id(),
    )
    verify_budget(ue, clean, budget, strict=True)
    return ue


def _class_patterns(rng: np.random.Generator, k: int, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(k, *shape))


def forge_lsp(clean: LabeledImages, budget: PerturbationBudget = L2_1, patch_size: int = 4,
              seed: int = 0) -> UEDataset:
    """Class-wise patch pattern tiled over the image and scaled to the l2 budget."""
    c, h, w = clean.image_shape
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise ValueError(f"patch_size {patch_size} must divide image side {h}x{w}")
    rng = np.random.default_rng(seed)
    k = clean.num_classes
    patches = _class_patterns(rng, k, (c, patch_size, patch_size))
    tiled = np.tile(patches, (1, 1, h // patch_size, w // patch_size))
    if budget.norm == "l2":
        norms = _per_sample_l2(tiled)
        tiled = tiled * (budget.epsilon / norms).reshape(-1, 1, 1, 1)
    else:
        tiled = np.sign(tiled) * budget.epsilon
    delta = tiled[clean.labels]
    images = apply_budget(clean.images, delta, budget)
    return _emit(clean, images, "lsp", budget, seed, {"patch_size": patch_size})


def forge_random_class_patch(clean: LabeledImages, budget: PerturbationBudget = LINF_8,
                             seed: int = 0) -> UEDataset:
    """Per-class random noise drawn once at full budget."""
    rng = np.random.default_rng(seed)
    k = clean.num_classes
    if budget.norm == "l_inf":
        noise = rng.choice([-1.0, 1.0], size=(k, *clean.image_shape)) * budget.epsilon
    else:
        noise = rng.standard_normal((k, *clean.image_shape))
        noise *= (budget.epsilon / _per_sample_l2(noise)).reshape(-1, 1, 1, 1)
    images = apply_budget(clean.images, noise[clean.labels], budget)
    return _emit(clean, images, "random_class_patch", budget, seed)


def _step(delta: torch.Tensor, grad: torch.Tensor, budget: PerturbationBudget,
          size: float) -> torch.Tensor:
    if budget.norm == "l_inf":
        return delta - size * grad.sign()
    g = grad.reshape(len(grad), -1)
    g = g / g.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return delta - size * g.reshape(grad.shape)


def _project_t(delta: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    if budget.norm == "l_inf":
        return delta.clamp(-budget.epsilon, budget.epsilon)
    n = delta.reshape(len(delta), -1).norm(dim=1).clamp_min(1e-12)
    scale = torch.clamp(budget.epsilon / n, max=1.0)
    return delta * scale.reshape(-1, 1, 1, 1)


def forge_emn(
    clean: LabeledImages,
    surrogate: ClassifierSpec | None = None,
    budget: PerturbationBudget = LINF_8,
    mode: str = "sample_wise",
    outer_steps: int = 10,
    inner_steps: int = 20,
    seed: int = 0,
    train_batches: int = 20,
    step_fraction: float = 0.1,
    stop_accuracy: float = 0.99,
    batch_size: int = 250,
) -> UEDataset:
    """Error-minimizing noise via alternating min-min optimization.

    Each outer round trains the surrogate for ``train_batches`` minibatches
    on the current poisoned images, then runs ``inner_steps`` projected
    sign-gradient (or normalized-gradient for l2) descent steps of size
    ``step_fraction * epsilon`` on the noise. ``class_wise`` shares one noise
    tensor per label. Stops early once the surrogate fits the poisoned set
    to ``stop_accuracy``.
    """
    if mode not in ("sample_wise", "class_wise"):
        raise ValueError(f"unknown mode {mode!r}")
    surrogate = surrogate or ClassifierSpec(seed=seed)
    kind = "emn_sample" if mode == "sample_wise" else "emn_class"
    k = clean.num_classes
    x = torch.from_numpy(clean.images)
    y = torch.from_numpy(clean.labels)
    n = len(clean)
    if budget.epsilon == 0:
        return _emit(clean, clean.images.copy(), kind, budget, seed, {"mode": mode})

    model = build_classifier(surrogate, clean.image_shape[0], k)
    opt = torch.optim.Adam(model.parameters(), lr=surrogate.lr)
    rng = np.random.default_rng(seed)
    if mode == "sample_wise":
        delta = torch.zeros_like(x)
    else:
        delta = torch.zeros((k, *clean.image_shape))
    size = step_fraction * budget.epsilon

    def poisoned(idx):
        d = delta[idx] if mode == "sample_wise" else delta[y[idx]]
        return torch.clamp(x[idx] + d, 0.0, 1.0)

    for outer in range(outer_steps):
        model.train()
        for _ in range(train_batches):
            idx = torch.from_numpy(rng.choice(n, size=min(surrogate.batch_size, n), replace=False))
            loss = F.cross_entropy(model(to_model_space(poisoned(idx))), y[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"surrogate loss diverged in round {outer}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        if mode == "sample_wise":
            for start in range(0, n, batch_size):
                idx = torch.arange(start, min(start + batch_size, n))
                d = delta[idx].clone()
                for _ in range(inner_steps):
                    d.requires_grad_(True)
                    adv = torch.clamp(x[idx] + d, 0.0, 1.0)
                    loss = F.cross_entropy(model(to_model_space(adv)), y[idx], reduction="sum")
                    (g,) = torch.autograd.grad(loss, d)
                    with torch.no_grad():
                        d = _project_t(_step(d, g, budget, size), budget)
                        d = torch.clamp(x[idx] + d, 0.0, 1.0) - x[idx]
                delta[idx] = d.detach()
        else:
            for _ in range(inner_steps):
                d = delta.clone().requires_grad_(True)
                grad = torch.zeros_like(delta)
                for start in range(0, n, batch_size):
                    idx = torch.arange(start, min(start + batch_size, n))
                    adv = torch.clamp(x[idx] + d[y[idx]], 0.0, 1.0)
                    loss = F.cross_entropy(model(to_model_space(adv)), y[idx], reduction="sum")
                    (g,) = torch.autograd.grad(loss, d)
                    grad += g
                with torch.no_grad():
                    delta = _project_t(_step(delta, grad, budget, size), budget)
        for p in model.parameters():
            p.requires_grad_(True)
        with torch.no_grad():
            correct = 0
            for start in range(0, n, batch_size):
                idx = torch.arange(start, min(start + batch_size, n))
                correct += int((model(to_model_space(poisoned(idx))).argmax(1) == y[idx]).sum())
        acc = correct / n
        log.info("emn round %d: surrogate accuracy on poisoned set %.3f", outer, acc)
        if acc >= stop_accuracy:
            break

    full = delta.numpy() if mode == "sample_wise" else delta.numpy()[clean.labels]
    images = apply_budget(clean.images, full.astype(np.float64), budget)
    return _emit(clean, images, kind, budget, seed,
                 {"mode": mode, "outer_steps": outer_steps, "inner_steps": inner_steps,
                  "rounds_run": outer + 1})


def forge(clean: LabeledImages, kind: str, seed: int, budget: PerturbationBudget | None = None,
          **kwargs) -> UEDataset:
    """Dispatch on ``kind`` with the standard budget for that kind."""
    if kind == "emn_sample":
        return forge_emn(clean, budget=budget or LINF_8, mode="sample_wise", seed=seed, **kwargs)
    if kind == "emn_class":
        return forge_emn(clean, budget=budget or LINF_8, mode="class_wise", seed=seed, **kwargs)
    if kind == "lsp":
        return forge_lsp(clean, budget=budget or L2_1, seed=seed, **kwargs)
    if kind == "random_class_patch":
        return forge_random_class_patch(clean, budget=budget or LINF_8, seed=seed)
    raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
