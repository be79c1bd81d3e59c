"""Experiment orchestration: forge -> DDPM -> purify -> train -> evaluate.

A :class:`Workbench` memoizes every expensive artifact by the configuration
that determines it, so pipelines and ablations that share stages (same
benchmark, same DDPM, same forged set) compute them once per process.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .classify import ClassifierSpec, evaluate, train_classifier
from .container import atomic_write_text, write_json
from .data import LabeledImages
from .denoiser import DenoiserSpec, TrainState, finetune_ddpm, train_ddpm
from .forge import forge, verify_budget
from .perceptual import FeatureExtractor, train_extractor
from .purify import GuidanceParams, PurificationTrace, psnr, purify
from .schedule import desk_schedule
from .toydata import DISJOINT_KINDS, make_benchmark, make_shapes

log = logging.getLogger(__name__)

RECORD_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    n_train: int = 2000
    n_test: int = 500
    n_surrogate: int = 1000
    image_size: int = 16
    surrogate: str = "match"
    noise_kind: str = "emn_class"
    emn_outer_steps: int = 10
    emn_inner_steps: int = 20
    T: int = 100
    ddpm_width: int = 32
    ddpm_steps: int = 2000
    ddpm_batch: int = 64
    ddpm_lr: float = 1e-3
    finetune: bool = False
    source_steps: int = 2000
    ft_steps: int = 2000
    ft_lr_scale: float = 1.0
    extractor_steps: int = 600
    purify: bool = True
    unconditional: bool = False
    lambda1: float = 1e4
    lambda2: float = 10.0
    T_p: int = 15
    N: int = 4
    condition_mode: str = "fresh_noise"
    classifier_epochs: int = 30
    classifier_width: int = 16
    classifier_lr: float = 2e-3
    classifier_batch: int = 64
    sweep: tuple = ((4, 15), (2, 30), (1, 60))
    sweep_count: int = 500
    sweep_guided: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "sweep" in d:
            d["sweep"] = tuple(tuple(int(v) for v in pair) for pair in d["sweep"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sweep"] = [list(p) for p in self.sweep]
        return d

    def classifier_spec(self) -> ClassifierSpec:
        return ClassifierSpec(width=self.classifier_width, epochs=self.classifier_epochs,
                              batch_size=self.classifier_batch, lr=self.classifier_lr,
                              seed=self.seed)

    def guidance(self) -> GuidanceParams:
        return GuidanceParams(self.lambda1, self.lambda2, self.T_p, self.N, self.condition_mode)


@dataclass
class ExperimentRecord:
    name: str
    config: dict
    seeds: dict
    datasets: dict = field(default_factory=dict)
    arms: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    complete: bool = False
    failed_stage: str | None = None
    error: str | None = None

    def accuracy(self, arm: str) -> float:
        return self.arms[arm]["final_accuracy"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = RECORD_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        d = dict(d)
        d.pop("format_version", None)
        return cls(**d)

    def save(self, directory) -> Path:
        """Write record.json and metrics.csv, which are seed-determined, and
        timings.json, which is not."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        write_json(directory / "timings.json", d.pop("wall_clock"))
        write_json(directory / "record.json", d)
        atomic_write_text(directory / "metrics.csv", self.metrics_csv())
        return directory

    @classmethod
    def load(cls, directory) -> "ExperimentRecord":
        directory = Path(directory)
        d = json.loads((directory / "record.json").read_text())
        if (directory / "timings.json").exists():
            d["wall_clock"] = json.loads((directory / "timings.json").read_text())
        return cls.from_dict(d)

    def metrics_csv(self) -> str:
        """Long-format metric table: ``record,arm,metric,value``; no timings."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["record", "arm", "metric", "value"])
        for arm in sorted(self.arms):
            m = self.arms[arm]
            for key in sorted(m):
                val = m[key]
                if isinstance(val, list):
                    for i, v in enumerate(val):
                        w.writerow([self.name, arm, f"{key}[{i}]", f"{v:.6g}"])
                elif isinstance(val, (int, float)):
                    w.writerow([self.name, arm, key, f"{val:.6g}"])
        for key in sorted(self.extra):
            val = self.extra[key]
            if isinstance(val, (int, float)) and not isinstance(val, bool):
                w.writerow([self.name, "-", key, f"{val:.6g}"])
        return buf.getvalue()


class Workbench:
    """Per-process memo of benchmark data, forged sets, models and purified sets."""

    def __init__(self):
        self._memo: dict = {}
        self.traces: dict = {}

    def _get(self, key, fn):
        if key not in self._memo:
            self._memo[key] = fn()
        return self._memo[key]

    def benchmark(self, cfg: PipelineConfig) -> dict[str, LabeledImages]:
        key = ("bench", cfg.seed, cfg.n_train, cfg.n_test, cfg.n_surrogate, cfg.image_size,
               cfg.surrogate)
        return self._get(key, lambda: make_benchmark(
            cfg.seed, cfg.n_train, cfg.n_test, cfg.n_surrogate, cfg.image_size, cfg.surrogate))

    def unlearnable(self, cfg: PipelineConfig) -> LabeledImages:
        key = ("ue", cfg.seed, cfg.n_train, cfg.image_size, cfg.noise_kind,
               cfg.emn_outer_steps, cfg.emn_inner_steps)
        clean = self.benchmark(cfg)["train"]

        def make():
            kw = {}
            if cfg.noise_kind.startswith("emn"):
                kw = {"outer_steps": cfg.emn_outer_steps, "inner_steps": cfg.emn_inner_steps}
            ue = forge(clean, cfg.noise_kind, seed=cfg.seed + 1, **kw)
            verify_budget(ue, clean, strict=True)
            return ue

        return self._get(key, make)

    def _ddpm_common(self, cfg):
        return (cfg.seed, cfg.n_surrogate, cfg.image_size, cfg.T, cfg.ddpm_width,
                cfg.ddpm_batch, cfg.ddpm_lr)

    def source_ddpm(self, cfg: PipelineConfig) -> TrainState:
        """DDPM pretrained on the class-disjoint shapes, the fine-tuning source."""
        key = ("source", *self._ddpm_common(cfg), cfg.source_steps)

        def make():
            data = make_shapes(cfg.n_surrogate, cfg.seed + 7919, DISJOINT_KINDS,
                               cfg.image_size, "shapes-source")
            return train_ddpm(data, DenoiserSpec(base_width=cfg.ddpm_width,
                                                 resolution=cfg.image_size),
                              desk_schedule(cfg.T), cfg.source_steps, cfg.ddpm_batch,
                              cfg.seed + 2, cfg.ddpm_lr)

        return self._get(key, make)

    def ddpm(self, cfg: PipelineConfig) -> TrainState:
        if cfg.finetune:
            key = ("ddpm-ft", cfg.surrogate, *self._ddpm_common(cfg), cfg.source_steps,
                   cfg.ft_steps, cfg.ft_lr_scale)
            return self._get(key, lambda: finetune_ddpm(
                self.source_ddpm(cfg), self.benchmark(cfg)["surrogate"], cfg.ft_steps,
                cfg.ft_lr_scale, cfg.seed + 3, cfg.ddpm_batch))
        key = ("ddpm", cfg.surrogate, *self._ddpm_common(cfg), cfg.ddpm_steps)
        return self._get(key, lambda: train_ddpm(
            self.benchmark(cfg)["surrogate"],
            DenoiserSpec(base_width=cfg.ddpm_width, resolution=cfg.image_size),
            desk_schedule(cfg.T), cfg.ddpm_steps, cfg.ddpm_batch, cfg.seed + 2, cfg.ddpm_lr))

    def extractor(self, cfg: PipelineConfig) -> FeatureExtractor:
        key = ("phi", cfg.seed, cfg.n_surrogate, cfg.image_size, cfg.surrogate,
               cfg.extractor_steps)
        return self._get(key, lambda: train_extractor(
            self.benchmark(cfg)["surrogate"], "rotation", cfg.extractor_steps, cfg.seed + 4))

    @staticmethod
    def _purified_key(cfg: PipelineConfig, count: int | None) -> tuple:
        ddpm_key = ("ft" if cfg.finetune else "scratch", cfg.ddpm_steps, cfg.source_steps,
                    cfg.ft_steps, cfg.ft_lr_scale, cfg.ddpm_batch, cfg.ddpm_lr)
        return ("le", cfg.seed, cfg.n_train, cfg.image_size, cfg.surrogate, cfg.noise_kind,
                cfg.emn_outer_steps, cfg.emn_inner_steps, ddpm_key, cfg.T, cfg.ddpm_width,
                cfg.extractor_steps, cfg.unconditional, cfg.guidance(), count)

    def purified(self, cfg: PipelineConfig, count: int | None = None) -> LabeledImages:
        g = cfg.guidance()
        key = self._purified_key(cfg, count)

        def make():
            ue = self.unlearnable(cfg)
            if count is not None:
                ue = ue.subset(slice(0, count))
            state = self.ddpm(cfg)
            phi = None if cfg.unconditional or g.lambda2 == 0 else self.extractor(cfg)
            images, trace = purify(state, phi, ue.images, g, seed=cfg.seed + 5,
                                   unconditional=cfg.unconditional)
            self.traces[key] = trace
            return ue.with_images(images, name=f"{ue.name}-le", provenance_entry={
                "stage": "purify",
                "source": ue.name,
                "source_content_id": ue.content_id(),
                "ddpm_trained_on": state.trained_on,
                "ddpm_step": state.step,
                "guidance": g.to_dict(),
                "unconditional": cfg.unconditional,
                "seed": cfg.seed + 5,
            })

        le = self._get(key, make)
        return le

    def trace_for(self, cfg: PipelineConfig, count: int | None = None) -> PurificationTrace | None:
        """The guidance trace of a purification already run in this workbench."""
        return self.traces.get(self._purified_key(cfg, count))

    def trained_arm(self, cfg: PipelineConfig, arm: str, data: LabeledImages) -> dict:
        key = ("arm", data.content_id(), cfg.classifier_spec(), cfg.n_test, cfg.seed)

        def make():
            test = self.benchmark(cfg)["test"]
            model, curve = train_classifier(data, cfg.classifier_spec(), test,
                                            num_classes=len(test.class_names))
            return {"final_accuracy": curve[-1], "accuracy_curve": curve,
                    "best_accuracy": max(curve)}

        return dict(self._get(key, make))


def _psnr_stats(images: np.ndarray, clean: np.ndarray) -> dict:
    p = psnr(images, clean)
    p = p[np.isfinite(p)]
    if not len(p):
        return {}
    return {"psnr_to_clean_mean": float(p.mean()), "psnr_to_clean_std": float(p.std())}


def run_pipeline(cfg: PipelineConfig, workbench: Workbench | None = None,
                 name: str = "pipeline") -> ExperimentRecord:
    """Clean, unlearnable and (optionally) purified training arms under one classifier spec."""
    wb = workbench or Workbench()
    record = ExperimentRecord(name=name, config=cfg.to_dict(), seeds={
        "benchmark": cfg.seed, "forge": cfg.seed + 1, "ddpm": cfg.seed + 2,
        "finetune": cfg.seed + 3, "extractor": cfg.seed + 4, "purify": cfg.seed + 5,
        "classifier": cfg.seed,
    })
    stage = "benchmark"
    try:
        t0 = time.perf_counter()
        bench = wb.benchmark(cfg)
        clean = bench["train"]
        record.datasets = {
            "clean": {"id": clean.content_id(), "name": clean.name},
            "test": {"id": bench["test"].content_id(), "name": bench["test"].name},
            "surrogate": {"id": bench["surrogate"].content_id(),
                          "name": bench["surrogate"].name, "distribution": cfg.surrogate},
        }
        record.wall_clock["benchmark"] = time.perf_counter() - t0

        stage = "forge"
        t0 = time.perf_counter()
        ue = wb.unlearnable(cfg)
        record.datasets["ue"] = {"id": ue.content_id(), "name": ue.name,
                                 "noise_kind": cfg.noise_kind, "provenance": ue.provenance}
        record.wall_clock["forge"] = time.perf_counter() - t0

        stage = "train_classifier"
        t0 = time.perf_counter()
        record.arms["clean"] = wb.trained_arm(cfg, "clean", clean)
        record.arms["ue"] = wb.trained_arm(cfg, "ue", ue)
        record.arms["ue"].update(_psnr_stats(ue.images, clean.images))
        record.wall_clock["classifiers"] = time.perf_counter() - t0

        if cfg.purify:
            stage = "ddpm"
            t0 = time.perf_counter()
            state = wb.ddpm(cfg)
            record.extra["ddpm_final_loss"] = state.final_smoothed_loss()
            record.extra["ddpm_steps"] = state.step
            record.wall_clock["ddpm"] = time.perf_counter() - t0

            stage = "purify"
            t0 = time.perf_counter()
            le = wb.purified(cfg)
            record.datasets["purified"] = {"id": le.content_id(), "name": le.name,
                                           "provenance": le.provenance}
            record.wall_clock["purify"] = time.perf_counter() - t0

            stage = "train_classifier"
            t0 = time.perf_counter()
            record.arms["purified"] = wb.trained_arm(cfg, "purified", le)
            record.arms["purified"].update(_psnr_stats(le.images, clean.images))
            record.wall_clock["purified_classifier"] = time.perf_counter() - t0
        record.complete = True
    except Exception as exc:  # recorded, then re-raised for callers that want it
        record.failed_stage = stage
        record.error = f"{type(exc).__name__}: {exc}"
        log.error("pipeline %s failed in stage %s: %s", name, stage, exc)
        raise PipelineError(record) from exc
    return record


class PipelineError(RuntimeError):
    def __init__(self, record: ExperimentRecord):
        super().__init__(f"stage {record.failed_stage} failed: {record.error}")
        self.record = record


def monotone_sane(record: ExperimentRecord) -> bool:
    """clean >= purified >= ue on a completed three-arm record."""
    a = record.arms
    return a["clean"]["final_accuracy"] >= a["purified"]["final_accuracy"] >= \
        a["ue"]["final_accuracy"]


def run_ablation(cfg: PipelineConfig, workbench: Workbench | None = None) -> list[ExperimentRecord]:
    """{fine-tune on/off} x {joint conditioning on/off}, plus the N-vs-T_p sweep.

    Every arm shares the benchmark, forged set, classifier spec and seeds.
    Sweep arms purify the first ``sweep_count`` unlearnable images and report
    PSNR to their clean originals; they run unguided unless ``sweep_guided``.
    """
    wb = workbench or Workbench()
    records = []
    scratch_cfg = replace(cfg, finetune=False)
    for ft in (False, True):
        for jc in (False, True):
            arm_cfg = replace(cfg, finetune=ft, unconditional=not jc)
            name = f"ft{int(ft)}_jc{int(jc)}"
            rec = run_pipeline(arm_cfg, wb, name=name)
            rec.extra["finetune"] = ft
            rec.extra["joint_conditional"] = jc
            records.append(rec)
    scratch = wb.ddpm(scratch_cfg)
    ft_state = wb.ddpm(replace(cfg, finetune=True))
    threshold = scratch.final_smoothed_loss()
    ft_hit = ft_state.steps_to_threshold(threshold)
    for rec in records:
        rec.extra["loss_threshold"] = threshold
        rec.extra["scratch_steps"] = scratch.step
        rec.extra["ft_steps_to_threshold"] = -1 if ft_hit is None else ft_hit

    bench = wb.benchmark(cfg)
    clean = bench["train"].images[:cfg.sweep_count]
    for n_iter, t_p in cfg.sweep:
        sweep_cfg = replace(cfg, N=n_iter, T_p=t_p, finetune=False,
                            unconditional=not cfg.sweep_guided)
        le = wb.purified(sweep_cfg, count=cfg.sweep_count)
        rec = ExperimentRecord(name=f"sweep_N{n_iter}_Tp{t_p}", config=sweep_cfg.to_dict(),
                               seeds={"purify": cfg.seed + 5})
        rec.arms["purified"] = _psnr_stats(le.images, clean)
        rec.extra.update({"N": n_iter, "T_p": t_p, "total_steps": n_iter * t_p})
        rec.complete = True
        records.append(rec)
    return records


def ablation_summary(records: list[ExperimentRecord]) -> dict:
    by = {r.name: r for r in records}
    out = {}
    for ft in (0, 1):
        on, off = by.get(f"ft{ft}_jc1"), by.get(f"ft{ft}_jc0")
        if on and off:
            out[f"ft{ft}_jc_gain"] = on.accuracy("purified") - off.accuracy("purified")
    first = records[0].extra if records else {}
    out["ft_steps_to_threshold"] = first.get("ft_steps_to_threshold")
    out["scratch_steps"] = first.get("scratch_steps")
    out["sweep_psnr"] = {r.name: r.arms["purified"].get("psnr_to_clean_mean")
                         for r in records if r.name.startswith("sweep")}
    return out
