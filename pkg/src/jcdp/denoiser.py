"""The epsilon-prediction network, its training loops and checkpoints."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import ContainerError, read_json, read_tensor, write_json, write_tensor
from .data import LabeledImages, to_model_space
from .nets import TinyUNet, seeded
from .schedule import NoiseSchedule, build_schedule

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEFAULT_LR = 1e-3


@dataclass(frozen=True)
class DenoiserSpec:
    channels: int = 3
    base_width: int = 32
    depth: int = 1
    time_embedding_dim: int = 64
    resolution: int = 16

    def build(self, seed: int) -> TinyUNet:
        with seeded(seed):
            return TinyUNet(self.channels, self.base_width, self.depth, self.time_embedding_dim)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.build(0).parameters())

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    spec: DenoiserSpec
    schedule: NoiseSchedule
    model: TinyUNet
    seed: int
    step: int = 0
    lr: float = DEFAULT_LR
    optimizer_state: dict | None = None
    loss_history: list[tuple[int, float]] = field(default_factory=list)
    trained_on: str = ""
    source: str | None = None

    @property
    def parameters(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def smoothed_losses(self, window: int = 5) -> list[tuple[int, float]]:
        """Trailing moving average over the logged interval losses."""
        out = []
        vals = [v for _, v in self.loss_history]
        for i, (s, _) in enumerate(self.loss_history):
            lo = max(0, i - window + 1)
            out.append((s, float(np.mean(vals[lo:i + 1]))))
        return out

    def final_smoothed_loss(self, window: int = 5) -> float:
        sm = self.smoothed_losses(window)
        if not sm:
            raise ValueError("no loss history")
        return sm[-1][1]

    def steps_to_threshold(self, threshold: float, window: int = 5) -> int | None:
        """First logged step whose smoothed loss is at or below ``threshold``."""
        for s, v in self.smoothed_losses(window):
            if v <= threshold:
                return s
        return None


def training_loss(model: torch.nn.Module, x0: torch.Tensor, t: torch.Tensor,
                  eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared epsilon-prediction error at 1-based timesteps ``t``."""
    ab = torch.tensor(np.asarray(schedule.alpha_bar), dtype=x0.dtype)[t - 1].reshape(-1, 1, 1, 1)
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    return ((eps - model(x_t, t)) ** 2).mean()


def _check_data(raw_data: LabeledImages, spec: DenoiserSpec) -> torch.Tensor:
    if len(raw_data) == 0:
        raise ValueError("empty training set")
    c, h, w = raw_data.image_shape
    if c != spec.channels or h != spec.resolution or w != spec.resolution:
        raise ValueError(
            f"data shape {raw_data.image_shape} does not match spec "
            f"({spec.channels}, {spec.resolution}, {spec.resolution})"
        )
    return to_model_space(torch.from_numpy(raw_data.images))


def _run(state: TrainState, x_all: torch.Tensor, steps: int, batch_size: int,
         seed: int, log_every: int) -> TrainState:
    model = state.model
    opt = torch.optim.Adam(model.parameters(), lr=state.lr)
    if state.optimizer_state is not None:
        opt.load_state_dict(state.optimizer_state)
        for group in opt.param_groups:
            group["lr"] = state.lr
    rng = np.random.default_rng([seed, state.step])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    n = len(x_all)
    order = rng.permutation(n)
    cursor = 0
    running, count = 0.0, 0
    model.train()
    for _ in range(steps):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = torch.from_numpy(order[cursor:cursor + batch_size])
        cursor += batch_size
        x0 = x_all[idx]
        t = torch.randint(1, state.schedule.T + 1, (len(x0),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        loss = training_loss(model, x0, t, eps, state.schedule)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {state.step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        state.step += 1
        running += float(loss.detach())
        count += 1
        if count == log_every:
            state.loss_history.append((state.step, running / count))
            running, count = 0.0, 0
    if count:
        state.loss_history.append((state.step, running / count))
    model.eval()
    state.optimizer_state = opt.state_dict()
    return state


def train_ddpm(
    raw_data: LabeledImages,
    spec: DenoiserSpec,
    schedule: NoiseSchedule,
    steps: int,
    batch_size: int = 64,
    seed: int = 0,
    lr: float = DEFAULT_LR,
    log_every: int = 20,
) -> TrainState:
    """Train an unconditional epsilon model from a seeded initialization."""
    x_all = _check_data(raw_data, spec)
    state = TrainState(
        spec=spec, schedule=schedule, model=spec.build(seed), seed=seed, lr=lr,
        trained_on=raw_data.content_id(),
    )
    state.model.eval()
    return _run(state, x_all, steps, min(batch_size, len(x_all)), seed, log_every)


def finetune_ddpm(
    source: TrainState | str | Path,
    raw_data: LabeledImages,
    steps: int,
    lr_scale: float = 1.0,
    seed: int = 0,
    batch_size: int = 64,
    log_every: int = 20,
) -> TrainState:
    """Continue training from ``source`` weights on ``raw_data`` with a fresh optimizer."""
    if not isinstance(source, TrainState):
        source = load_checkpoint(source)
    spec = source.spec
    x_all = _check_data(raw_data, spec)
    model = spec.build(seed)
    model.load_state_dict(source.model.state_dict())
    model.eval()
    state = TrainState(
        spec=spec, schedule=source.schedule, model=model, seed=seed,
        lr=source.lr * lr_scale, trained_on=raw_data.content_id(),
        source=source.trained_on,
    )
    return _run(state, x_all, steps, min(batch_size, len(x_all)), seed, log_every)


def predict_noise(state: TrainState, x_t: torch.Tensor, t) -> torch.Tensor:
    """Deterministic epsilon prediction at 1-based timestep ``t`` (int or per-sample tensor)."""
    if x_t.ndim != 4 or x_t.shape[1] != state.spec.channels:
        raise ValueError(f"expected N x {state.spec.channels} x H x W, got {tuple(x_t.shape)}")
    if not torch.isfinite(x_t).all():
        raise ValueError("x_t has non-finite entries")
    if isinstance(t, torch.Tensor):
        tt = t.to(torch.long).reshape(-1)
        if tt.numel() == 1:
            tt = tt.expand(x_t.shape[0])
    else:
        state.schedule.check_t(t)
        tt = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
    if tt.min() < 1 or tt.max() > state.schedule.T:
        raise ValueError(f"timesteps outside [1, {state.schedule.T}]")
    model = state.model
    model.eval()
    with torch.no_grad():
        return model(x_t.to(next(model.parameters()).dtype), tt)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(state: TrainState, directory) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, tensor in state.model.state_dict().items():
        write_tensor(directory / "params" / f"{name}.jcdp", tensor.detach().numpy())
        names.append(name)
    optim_files = {}
    if state.optimizer_state is not None:
        (directory / "optim").mkdir(exist_ok=True)
        param_names = [n for n, _ in state.model.named_parameters()]
        for idx, slot in state.optimizer_state["state"].items():
            for key, value in slot.items():
                fname = f"{param_names[idx]}.{key}.jcdp"
                arr = value.detach().numpy()
                if arr.dtype != np.float32:
                    arr = arr.astype(np.float32)
                write_tensor(directory / "optim" / fname, np.asarray(arr))
                optim_files.setdefault(param_names[idx], {})[key] = fname
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "ddpm",
        "spec": state.spec.to_dict(),
        "schedule": state.schedule.params(),
        "step": state.step,
        "seed": state.seed,
        "lr": state.lr,
        "trained_on": state.trained_on,
        "source": state.source,
        "loss_history": [[s, v] for s, v in state.loss_history],
        "parameters": names,
        "optimizer": optim_files,
    }
    write_json(directory / "manifest.json", manifest)
    return directory


def load_checkpoint(directory) -> TrainState:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = read_json(path)
    if manifest.get("format_version") != CHECKPOINT_VERSION or manifest.get("kind") != "ddpm":
        raise ContainerError(
            "checkpoint_version",
            f"unsupported checkpoint {manifest.get('kind')} v{manifest.get('format_version')}",
        )
    spec = DenoiserSpec(**manifest["spec"])
    schedule = build_schedule(**manifest["schedule"])
    model = spec.build(manifest["seed"])
    expected = set(model.state_dict())
    if set(manifest["parameters"]) != expected:
        raise ContainerError("architecture", "checkpoint parameters do not match spec")
    sd = {}
    for name in manifest["parameters"]:
        sd[name] = torch.from_numpy(read_tensor(directory / "params" / f"{name}.jcdp"))
    try:
        model.load_state_dict(sd)
    except RuntimeError as exc:
        raise ContainerError("architecture", str(exc)) from exc
    model.eval()
    optimizer_state = None
    if manifest.get("optimizer"):
        param_names = [n for n, _ in model.named_parameters()]
        opt = torch.optim.Adam(model.parameters(), lr=manifest["lr"])
        state_dict = opt.state_dict()
        for idx, pname in enumerate(param_names):
            files = manifest["optimizer"].get(pname)
            if files:
                state_dict["state"][idx] = {
                    key: torch.from_numpy(read_tensor(directory / "optim" / fname)).reshape(
                        () if key == "step" else sd[pname].shape)
                    for key, fname in files.items()
                }
        optimizer_state = state_dict
    return TrainState(
        spec=spec,
        schedule=schedule,
        model=model,
        seed=manifest["seed"],
        step=manifest["step"],
        lr=manifest["lr"],
        optimizer_state=optimizer_state,
        loss_history=[(int(s), float(v)) for s, v in manifest["loss_history"]],
        trained_on=manifest.get("trained_on", ""),
        source=manifest.get("source"),
    )
