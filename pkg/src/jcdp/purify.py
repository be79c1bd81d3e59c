"""Joint-conditional diffusion purification.

Each purification iteration diffuses the current image ``T_p`` steps forward,
then runs the learned reverse chain back to ``t = 0`` with every transition
mean shifted by ``sigma_t^2 * (d1 + d2)``: ``d1`` pulls toward the noised
unlearnable input in pixel space (MSE), ``d2`` in feature space (perceptual
distance). The normalizer of the guidance densities cancels under the
log-gradient and is never computed.

Every batch element owns two seed-derived random streams keyed by a stream
id (its dataset index by default): one for the diffusion/sampling noise and
one for the condition noise. Guidance settings therefore never perturb the
sampling noise, and permuting a batch together with its ids permutes the
outputs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import check_value_space, to_data_space, to_model_space
from .denoiser import TrainState, predict_noise
from .perceptual import FeatureExtractor, distance_gradient
from .schedule import NoiseSchedule, diffuse_to, reverse_step_mean

CONDITION_MODES = ("fresh_noise", "frozen_track", "deterministic_mean")


@dataclass(frozen=True)
class GuidanceParams:
    lambda1: float = 1e4
    lambda2: float = 10.0
    T_p: int = 15
    N: int = 4
    condition_mode: str = "fresh_noise"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("guidance scales must be non-negative")
        if self.T_p < 1 or self.N < 1:
            raise ValueError(f"need T_p >= 1 and N >= 1, got {self.T_p}, {self.N}")
        if self.condition_mode not in CONDITION_MODES:
            raise ValueError(f"unknown condition_mode {self.condition_mode!r}")

    @classmethod
    def for_schedule(cls, schedule: NoiseSchedule, **kw) -> "GuidanceParams":
        kw.setdefault("T_p", max(1, round(0.15 * schedule.T)))
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


class ElementStreams:
    """Per-element sampling and condition generators."""

    def __init__(self, seed: int, ids):
        self.ids = [int(i) for i in ids]
        self.sample, self.cond = [], []
        for i in self.ids:
            words = np.random.SeedSequence(int(seed), spawn_key=(i,)).generate_state(4)
            self.sample.append(torch.Generator().manual_seed(int(words[0]) << 31 | int(words[1])))
            self.cond.append(torch.Generator().manual_seed(int(words[2]) << 31 | int(words[3])))
        self.frozen: torch.Tensor | None = None

    def randn(self, kind: str, shape, dtype=torch.float32) -> torch.Tensor:
        gens = self.sample if kind == "sample" else self.cond
        return torch.stack([torch.randn(tuple(shape), generator=g, dtype=dtype) for g in gens])


def psnr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-image PSNR in dB for [0, 1] images; inf for identical images."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    mse = ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(1.0 / mse)


def guidance_d1(x_star_t: torch.Tensor, x_tilde_t: torch.Tensor, lambda1: float) -> torch.Tensor:
    """``-lambda1`` times the gradient of per-image MSE to the condition."""
    if x_star_t.shape != x_tilde_t.shape:
        raise ValueError(f"shape mismatch {tuple(x_star_t.shape)} vs {tuple(x_tilde_t.shape)}")
    n = x_star_t[0].numel()
    return -lambda1 * 2.0 * (x_star_t - x_tilde_t) / n


def guidance_d2(phi: FeatureExtractor, x_star_t: torch.Tensor, x_tilde_t: torch.Tensor,
                lambda2: float) -> torch.Tensor:
    """``-lambda2`` times the perceptual-distance gradient."""
    if x_star_t.shape != x_tilde_t.shape:
        raise ValueError(f"shape mismatch {tuple(x_star_t.shape)} vs {tuple(x_tilde_t.shape)}")
    if lambda2 == 0:
        return torch.zeros_like(x_star_t)
    return -lambda2 * distance_gradient(phi, x_star_t, x_tilde_t)


def condition_image(x_tilde_0: torch.Tensor, t: int, schedule: NoiseSchedule, mode: str,
                    streams: ElementStreams) -> torch.Tensor:
    """The noised condition at level ``t`` under the chosen condition mode."""
    ab = schedule.alpha_bar[t - 1]
    if mode == "deterministic_mean":
        return math.sqrt(ab) * x_tilde_0
    if mode == "frozen_track":
        if streams.frozen is None:
            streams.frozen = streams.randn("cond", x_tilde_0.shape[1:], x_tilde_0.dtype)
        eps = streams.frozen
    else:
        eps = streams.randn("cond", x_tilde_0.shape[1:], x_tilde_0.dtype)
    return diffuse_to(x_tilde_0, t, eps, schedule)


@dataclass
class StepRecord:
    iteration: int
    t: int
    sigma_sq: float
    d1_norm: np.ndarray
    d2_norm: np.ndarray
    shift_norm: np.ndarray


def conditioned_reverse_step(
    state: TrainState,
    phi: FeatureExtractor | None,
    x_star_t: torch.Tensor,
    x_tilde_0: torch.Tensor,
    t: int,
    params: GuidanceParams,
    rng: ElementStreams,
    unconditional: bool = False,
    capture: dict | None = None,
) -> tuple[torch.Tensor, StepRecord]:
    """One guided reverse transition ``x*_t -> x*_{t-1}``.

    With ``unconditional`` the guidance terms are skipped entirely; the
    sampling noise comes from the same stream either way. No noise is
    injected at ``t = 1``.
    """
    schedule = state.schedule
    t = schedule.check_t(t)
    if t > params.T_p:
        raise ValueError(f"t={t} exceeds T_p={params.T_p}")
    eps_pred = predict_noise(state, x_star_t, t)
    mu = reverse_step_mean(x_star_t, eps_pred, t, schedule)
    s2 = float(schedule.sigma_sq[t - 1])
    b = x_star_t.shape[0]
    zeros = np.zeros(b)
    if unconditional:
        mean = mu
        d1n = d2n = shift = zeros
    else:
        x_tilde_t = condition_image(x_tilde_0, t, schedule, params.condition_mode, rng)
        d1 = guidance_d1(x_star_t, x_tilde_t, params.lambda1)
        if params.lambda2 != 0 and phi is None:
            raise ValueError("lambda2 > 0 needs a feature extractor")
        d2 = guidance_d2(phi, x_star_t, x_tilde_t, params.lambda2)
        total = d1 + d2
        mean = mu + s2 * total
        d1n = d1.flatten(1).norm(dim=1).numpy()
        d2n = d2.flatten(1).norm(dim=1).numpy()
        shift = s2 * total.flatten(1).norm(dim=1).numpy()
        if capture is not None:
            capture.update(d1=d1.clone(), d2=d2.clone(), sigma_sq=s2, t=t)
    if not torch.isfinite(mean).all():
        raise FloatingPointError(f"non-finite transition mean at t={t}")
    if t > 1:
        out = mean + math.sqrt(s2) * rng.randn("sample", x_star_t.shape[1:], x_star_t.dtype)
    else:
        out = mean
    return out, StepRecord(0, t, s2, d1n, d2n, shift)


@dataclass
class PurificationTrace:
    seed: int
    params: dict
    unconditional: bool
    steps: list[StepRecord] = field(default_factory=list)
    psnr_to_input: list[np.ndarray] = field(default_factory=list)
    captured: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)

    def merge(self, other: "PurificationTrace") -> None:
        """Append another chunk's elements to this trace."""
        if not self.steps:
            self.steps = other.steps
            self.psnr_to_input = other.psnr_to_input
            self.captured.update(other.captured)
            return
        for mine, theirs in zip(self.steps, other.steps):
            mine.d1_norm = np.concatenate([mine.d1_norm, theirs.d1_norm])
            mine.d2_norm = np.concatenate([mine.d2_norm, theirs.d2_norm])
            mine.shift_norm = np.concatenate([mine.shift_norm, theirs.shift_norm])
        self.psnr_to_input = [np.concatenate([a, b]) for a, b in
                              zip(self.psnr_to_input, other.psnr_to_input)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "iteration", "t", "sigma_sq", "d1_norm_mean", "d2_norm_mean",
                    "shift_norm_mean", "shift_norm_max"])
        for i, s in enumerate(self.steps):
            w.writerow([i, s.iteration, s.t, f"{s.sigma_sq:.9g}",
                        f"{s.d1_norm.mean():.9g}", f"{s.d2_norm.mean():.9g}",
                        f"{s.shift_norm.mean():.9g}", f"{s.shift_norm.max():.9g}"])
        return buf.getvalue()


def _as_unit_tensor(ue_batch) -> torch.Tensor:
    if hasattr(ue_batch, "images"):
        ue_batch = ue_batch.images
    if isinstance(ue_batch, np.ndarray):
        ue_batch = torch.from_numpy(np.ascontiguousarray(ue_batch, dtype=np.float32))
    check_value_space(ue_batch, "data_unit")
    return ue_batch.to(torch.float32)


def purify(
    state: TrainState,
    phi: FeatureExtractor | None,
    ue_batch,
    params: GuidanceParams,
    seed: int,
    stream_ids=None,
    unconditional: bool = False,
    batch_size: int = 250,
    capture_steps=(),
) -> tuple[np.ndarray, PurificationTrace]:
    """Purify unit-range images; returns float32 images in [0, 1] and a trace.

    ``capture_steps`` lists global step indices (within the first chunk)
    whose guidance tensors are kept in ``trace.captured``.
    """
    x_all = _as_unit_tensor(ue_batch)
    if params.T_p > state.schedule.T:
        raise ValueError(f"T_p={params.T_p} exceeds schedule T={state.schedule.T}")
    n = x_all.shape[0]
    ids = np.arange(n) if stream_ids is None else np.asarray(stream_ids)
    if len(ids) != n:
        raise ValueError("stream_ids length differs from batch")
    trace = PurificationTrace(seed=int(seed), params=params.to_dict(), unconditional=unconditional)
    outputs = []
    capture_steps = set(capture_steps)
    for start in range(0, n, batch_size):
        chunk = x_all[start:start + batch_size]
        streams = ElementStreams(seed, ids[start:start + batch_size])
        x_tilde_0 = to_model_space(chunk)
        x = x_tilde_0
        part = PurificationTrace(seed=int(seed), params=trace.params, unconditional=unconditional)
        step_index = 0
        for it in range(params.N):
            z = streams.randn("sample", x.shape[1:], x.dtype)
            x = diffuse_to(x, params.T_p, z, state.schedule)
            for t in range(params.T_p, 0, -1):
                cap = {} if (start == 0 and step_index in capture_steps) else None
                x, rec = conditioned_reverse_step(
                    state, phi, x, x_tilde_0, t, params, streams, unconditional, cap
                )
                rec.iteration = it
                part.steps.append(rec)
                if cap:
                    part.captured[step_index] = cap
                step_index += 1
            current = to_data_space(x).clamp(0.0, 1.0).numpy()
            part.psnr_to_input.append(psnr(current, chunk.numpy()))
        trace.merge(part)
        outputs.append(to_data_space(x).clamp(0.0, 1.0))
    out = torch.cat(outputs).numpy().astype(np.float32) if outputs else np.zeros_like(x_all.numpy())
    return out, trace


def grid_search_guidance(
    state: TrainState,
    phi: FeatureExtractor,
    reference: np.ndarray,
    perturbed: np.ndarray,
    base: GuidanceParams,
    seed: int,
    grid=(0.1, 1.0, 10.0, 100.0, 1e3, 1e4),
) -> dict[tuple[float, float], float]:
    """Mean PSNR to ``reference`` after purifying ``perturbed`` for each (lambda1, lambda2).

    Intended for surrogate data with synthetic perturbations, where the clean
    reference is known to the purifier.
    """
    scores = {}
    for l1 in grid:
        for l2 in grid:
            params = GuidanceParams(l1, l2, base.T_p, base.N, base.condition_mode)
            out, _ = purify(state, phi, perturbed, params, seed)
            scores[(l1, l2)] = float(np.mean(psnr(out, reference)))
    return scores
