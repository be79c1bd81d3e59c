"""Labeled image sets, value-space conversion and on-disk dataset manifests.

Images are float32 ``N x C x H x W`` arrays in the unit range ``[0, 1]``
("data" space). Networks consume the symmetric range ``[-1, 1]`` ("model"
space); :func:`to_model_space` and :func:`to_data_space` convert between them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .container import (
    MANIFEST_VERSION,
    ContainerError,
    read_json,
    read_tensor,
    write_json,
    write_tensor,
)

VALUE_SPACES = {"data_unit": (0.0, 1.0), "model_sym": (-1.0, 1.0)}


def to_model_space(x):
    return x * 2.0 - 1.0


def to_data_space(x):
    return (x + 1.0) / 2.0


def check_value_space(x, space: str) -> None:
    """Raise if ``x`` is non-finite or outside the declared range."""
    lo, hi = VALUE_SPACES[space]
    arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite entries in {space} batch")
    if arr.size and (arr.min() < lo or arr.max() > hi):
        raise ValueError(
            f"values in [{arr.min():.4g}, {arr.max():.4g}] outside {space} [{lo}, {hi}]"
        )


@dataclass
class LabeledImages:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    class_names: list[str] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("labels and images disagree in length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def content_id(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]

    def subset(self, index) -> "LabeledImages":
        return replace(self, images=self.images[index], labels=self.labels[index])

    def with_images(self, images, name=None, provenance_entry=None) -> "LabeledImages":
        prov = list(self.provenance)
        if provenance_entry is not None:
            prov.append(provenance_entry)
        return replace(
            self, images=images, name=name or self.name, provenance=prov
        )


# -- manifests ---------------------------------------------------------------


def save_dataset(directory, splits: dict[str, LabeledImages], name: str | None = None,
                 extra: dict | None = None) -> Path:
    """Write each split as image/label containers plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    manifest = {
        "format_version": MANIFEST_VERSION,
        "kind": "dataset",
        "name": name or first.name,
        "image_shape": list(first.image_shape),
        "class_names": list(first.class_names),
        "splits": {},
        "provenance": list(first.provenance),
    }
    for split, ds in splits.items():
        img_file, lbl_file = f"{split}_images.jcdp", f"{split}_labels.jcdp"
        write_tensor(directory / img_file, ds.images)
        write_tensor(directory / lbl_file, ds.labels)
        manifest["splits"][split] = {
            "images": img_file,
            "labels": lbl_file,
            "count": len(ds),
            "content_id": ds.content_id(),
            "class_names": list(ds.class_names),
        }
    if extra:
        manifest.update(extra)
    write_json(directory / "manifest.json", manifest)
    return directory


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = read_json(path)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ContainerError(
            "manifest_version", f"unknown manifest version {manifest.get('format_version')}"
        )
    return manifest


def load_dataset(directory, split: str = "train") -> LabeledImages:
    directory = Path(directory)
    manifest = load_manifest(directory)
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in {sorted(manifest['splits'])}")
    entry = manifest["splits"][split]
    images = read_tensor(directory / entry["images"])
    labels = read_tensor(directory / entry["labels"])
    return LabeledImages(
        images=images,
        labels=labels,
        name=manifest["name"],
        class_names=list(entry.get("class_names", manifest.get("class_names", []))),
        provenance=list(manifest.get("provenance", [])),
    )


def validate_dataset(directory, _seen=None) -> list[str]:
    """Check every container and walk the provenance chain.

    Returns a list of human-readable problems; empty means valid.
    """
    directory = Path(directory).resolve()
    seen = _seen if _seen is not None else set()
    if directory in seen:
        return [f"{directory}: provenance_chain: cycle"]
    seen.add(directory)
    problems: list[str] = []
    try:
        manifest = load_manifest(directory)
    except ContainerError as exc:
        return [f"{directory}: {exc}"]
    except FileNotFoundError as exc:
        return [f"{directory}: missing_file: {exc}"]
    except ValueError as exc:
        return [f"{directory}: manifest: {exc}"]
    shape = tuple(manifest.get("image_shape", ()))
    for split, entry in manifest.get("splits", {}).items():
        for key in ("images", "labels"):
            path = directory / entry[key]
            if not path.exists():
                problems.append(f"{path}: missing_file: referenced file is absent")
                continue
            try:
                arr = read_tensor(path)
            except ContainerError as exc:
                problems.append(f"{path}: {exc}")
                continue
            if key == "images" and tuple(arr.shape[1:]) != shape:
                problems.append(f"{path}: image_shape: {arr.shape[1:]} != {shape}")
            if len(arr) != entry.get("count", len(arr)):
                problems.append(f"{path}: count: {len(arr)} != {entry['count']}")
        if not problems and "content_id" in entry:
            ds = load_dataset(directory, split)
            if ds.content_id() != entry["content_id"]:
                problems.append(f"{directory}/{split}: content_id: stored id does not match contents")
    # the newest entry with a path names the immediate parent, which in turn
    # validates its own chain; older entries' paths are relative to ancestors
    linked = [s for s in manifest.get("provenance", []) if s.get("source_path")]
    for step in linked[-1:]:
        src = step["source_path"]
        src_dir = (directory / src).resolve() if not Path(src).is_absolute() else Path(src)
        sub = validate_dataset(src_dir, seen)
        problems.extend(sub)
        if not sub:
            src_manifest = load_manifest(src_dir)
            want = step.get("source_content_id")
            split = step.get("source_split", "train")
            have = src_manifest["splits"].get(split, {}).get("content_id")
            if want and have != want:
                problems.append(
                    f"{directory}: provenance_chain: source {src_dir} content {have} != {want}"
                )
    return problems
