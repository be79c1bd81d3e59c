"""Perceptual distance from a small self-supervised feature extractor.

The distance follows the LPIPS construction without learned weights: feature
maps are unit-normalized across channels at every location, differenced, and
the L2 norm of each tap layer's difference is summed over layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .container import ContainerError, read_json, read_tensor, write_json, write_tensor
from .data import LabeledImages, to_model_space
from .nets import SmallConvNet, seeded

EXTRACTOR_VERSION = 1
_NORM_EPS = 1e-10


@dataclass
class FeatureExtractor:
    net: SmallConvNet
    tap_layers: tuple[int, ...] = (0, 1)
    trained_on: str = ""
    labeling: str = "rotation"
    seed: int = 0
    steps: int = 0
    history: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = x.to(next(self.net.parameters()).dtype)
        feats = self.net.features(x)
        return [feats[i] for i in self.tap_layers]

    def parameters(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}

    def double(self) -> "FeatureExtractor":
        """A float64 copy, for finite-difference checks."""
        net = SmallConvNet(self.net.channels, self.net.num_classes, self.net.width)
        net.load_state_dict(self.net.state_dict())
        return FeatureExtractor(net.double(), self.tap_layers, self.trained_on,
                                self.labeling, self.seed, self.steps, list(self.history))


def rotate_batch(x: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Rotate each image by ``k * 90`` degrees."""
    out = torch.empty_like(x)
    for r in range(4):
        sel = k == r
        if sel.any():
            out[sel] = torch.rot90(x[sel], r, dims=(2, 3))
    return out


def train_extractor(
    raw_data: LabeledImages,
    pseudo_labels: str = "rotation",
    steps: int = 600,
    seed: int = 0,
    batch_size: int = 64,
    width: int = 16,
    lr: float = 2e-3,
) -> FeatureExtractor:
    """Train the feature network on surrogate data.

    ``pseudo_labels="rotation"`` predicts which of four rotations was
    applied; ``"labels"`` uses the dataset's own labels.
    """
    if len(raw_data) == 0:
        raise ValueError("empty training set")
    if pseudo_labels not in ("rotation", "labels"):
        raise ValueError(f"unknown labeling mode {pseudo_labels!r}")
    k = 4 if pseudo_labels == "rotation" else raw_data.num_classes
    with seeded(seed):
        net = SmallConvNet(raw_data.image_shape[0], k, width)
    x_all = to_model_space(torch.from_numpy(raw_data.images))
    y_all = torch.from_numpy(raw_data.labels)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    history = []
    net.train()
    bs = min(batch_size, len(x_all))
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(len(x_all), size=bs, replace=False))
        x = x_all[idx]
        if pseudo_labels == "rotation":
            y = torch.randint(0, 4, (bs,), generator=gen)
            x = rotate_batch(x, y)
        else:
            y = y_all[idx]
        loss = F.cross_entropy(net(x), y)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite extractor loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((step + 1, float(loss.detach())))
    return FeatureExtractor(net, trained_on=raw_data.content_id(), labeling=pseudo_labels,
                            seed=seed, steps=steps, history=history[::max(1, steps // 50)])


def rotation_accuracy(phi: FeatureExtractor, data: LabeledImages) -> float:
    """Rotation-prediction accuracy over all four rotations of ``data``."""
    x = to_model_space(torch.from_numpy(data.images))
    correct = 0
    with torch.no_grad():
        for r in range(4):
            pred = phi.net(torch.rot90(x, r, dims=(2, 3))).argmax(1)
            correct += int((pred == r).sum())
    return correct / (4 * len(data))


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    # sqrt with zero value and zero gradient at the origin
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def _unit(f: torch.Tensor) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + _NORM_EPS)


def perceptual_distance(phi: FeatureExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-element distance, shape (N,)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    total = torch.zeros(a.shape[0], dtype=next(phi.net.parameters()).dtype)
    for fa, fb in zip(phi.features(a), phi.features(b)):
        diff = _unit(fa) - _unit(fb)
        total = total + _safe_norm(diff.pow(2).flatten(1).sum(dim=1))
    return total


def distance_gradient(phi: FeatureExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Gradient of the per-element distance with respect to ``a``.

    Elements are independent, so the gradient of the summed distance gives
    every element's own gradient. Zero where the features coincide.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.enable_grad():
        a = a.detach().clone().requires_grad_(True)
        d = perceptual_distance(phi, a, b.detach())
        (grad,) = torch.autograd.grad(d.sum(), a)
    if not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite perceptual gradient")
    return grad.to(a.dtype)


def save_extractor(phi: FeatureExtractor, directory) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, tensor in phi.net.state_dict().items():
        write_tensor(directory / "params" / f"{name}.jcdp", tensor.detach().float().numpy())
        names.append(name)
    write_json(directory / "manifest.json", {
        "format_version": EXTRACTOR_VERSION,
        "kind": "extractor",
        "channels": phi.net.channels,
        "num_classes": phi.net.num_classes,
        "width": phi.net.width,
        "tap_layers": list(phi.tap_layers),
        "trained_on": phi.trained_on,
        "labeling": phi.labeling,
        "seed": phi.seed,
        "steps": phi.steps,
        "history": [[s, v] for s, v in phi.history],
        "parameters": names,
    })
    return directory


def load_extractor(directory) -> FeatureExtractor:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise FileNotFoundError(f"no extractor manifest in {directory}")
    m = read_json(directory / "manifest.json")
    if m.get("format_version") != EXTRACTOR_VERSION or m.get("kind") != "extractor":
        raise ContainerError("checkpoint_version", "unsupported extractor checkpoint")
    net = SmallConvNet(m["channels"], m["num_classes"], m["width"])
    sd = {n: torch.from_numpy(read_tensor(directory / "params" / f"{n}.jcdp"))
          for n in m["parameters"]}
    try:
        net.load_state_dict(sd)
    except RuntimeError as exc:
        raise ContainerError("architecture", str(exc)) from exc
    return FeatureExtractor(net, tuple(m["tap_layers"]), m["trained_on"], m["labeling"],
                            m["seed"], m["steps"], [tuple(h) for h in m["history"]])
