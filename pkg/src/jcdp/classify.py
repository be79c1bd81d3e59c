"""Standard supervised training of the small convnet and accuracy evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .container import ContainerError, read_json, read_tensor, write_json, write_tensor
from .data import LabeledImages, to_model_space
from .nets import ConvClassifier, seeded


@dataclass(frozen=True)
class ClassifierSpec:
    width: int = 16
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    flip: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def build_classifier(spec: ClassifierSpec, channels: int, num_classes: int) -> ConvClassifier:
    with seeded(spec.seed):
        return ConvClassifier(channels, num_classes, spec.width)


def _as_tensor(images: np.ndarray) -> torch.Tensor:
    return to_model_space(torch.from_numpy(np.ascontiguousarray(images)))


def predict(model: torch.nn.Module, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(_as_tensor(images[i:i + batch_size])).argmax(1).numpy())
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def evaluate(model: torch.nn.Module, test: LabeledImages) -> float:
    """Fraction of ``test`` classified correctly."""
    num_out = getattr(model, "num_classes", None)
    if num_out is not None and len(test) and test.labels.max() >= num_out:
        raise ValueError(
            f"test labels reach {test.labels.max()} but model has {num_out} classes"
        )
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = predict(model, test.images)
    return float(np.mean(pred == test.labels))


def train_classifier(
    data: LabeledImages,
    spec: ClassifierSpec,
    test: LabeledImages | None = None,
    num_classes: int | None = None,
):
    """Train from a seeded init; returns ``(model, curve)``.

    ``curve`` lists clean-test accuracy after each epoch (index 0 is the
    untrained model) when ``test`` is given, else it is empty.
    """
    k = num_classes or data.num_classes
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.labels.min() < 0 or data.labels.max() >= k:
        raise ValueError(f"labels outside [0, {k}) for {k} classes")
    if test is not None and test.image_shape != data.image_shape:
        raise ValueError(f"test shape {test.image_shape} != train shape {data.image_shape}")
    model = build_classifier(spec, data.image_shape[0], k)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr)
    steps_per_epoch = -(-len(data) // spec.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, spec.epochs * steps_per_epoch))
    rng = np.random.default_rng(spec.seed)
    gen = torch.Generator().manual_seed(spec.seed)
    x_all = _as_tensor(data.images)
    y_all = torch.from_numpy(data.labels)
    curve = [evaluate(model, test)] if test is not None else []
    for _ in range(spec.epochs):
        model.train()
        order = rng.permutation(len(data))
        for i in range(0, len(order), spec.batch_size):
            idx = torch.from_numpy(order[i:i + spec.batch_size])
            x, y = x_all[idx], y_all[idx]
            if spec.flip:
                flip = torch.rand(len(x), generator=gen) < 0.5
                x = torch.where(flip[:, None, None, None], x.flip(3), x)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise FloatingPointError("non-finite classifier loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        if test is not None:
            curve.append(evaluate(model, test))
    model.eval()
    return model, curve


CLASSIFIER_VERSION = 1


def save_classifier(model: ConvClassifier, spec: ClassifierSpec, directory,
                    curve=(), trained_on: str = "") -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, tensor in model.state_dict().items():
        write_tensor(directory / "params" / f"{name}.jcdp", tensor.detach().numpy())
        names.append(name)
    write_json(directory / "manifest.json", {
        "format_version": CLASSIFIER_VERSION,
        "kind": "classifier",
        "spec": spec.to_dict(),
        "channels": model.body[0].in_channels,
        "num_classes": model.num_classes,
        "trained_on": trained_on,
        "accuracy_curve": list(curve),
        "parameters": names,
    })
    return directory


def load_classifier(directory) -> tuple[ConvClassifier, dict]:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise FileNotFoundError(f"no classifier manifest in {directory}")
    m = read_json(directory / "manifest.json")
    if m.get("format_version") != CLASSIFIER_VERSION or m.get("kind") != "classifier":
        raise ContainerError("checkpoint_version", "unsupported classifier checkpoint")
    spec = ClassifierSpec(**m["spec"])
    model = ConvClassifier(m["channels"], m["num_classes"], spec.width)
    sd = {n: torch.from_numpy(read_tensor(directory / "params" / f"{n}.jcdp"))
          for n in m["parameters"]}
    try:
        model.load_state_dict(sd)
    except RuntimeError as exc:
        raise ContainerError("architecture", str(exc)) from exc
    model.eval()
    return model, m
