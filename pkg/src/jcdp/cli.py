"""Command-line entry point.

Every subcommand accepts ``--config FILE``: a JSON object whose keys are the
subcommand's option names (dashes as underscores, e.g. ``"n_train": 500``).
Values from the file replace built-in defaults and explicit flags replace
both. Stochastic subcommands require ``--seed`` on the command line.

On failure one JSON line goes to stderr and the exit code names the class:

    2  usage: unknown flag, missing or malformed argument
    3  schema: a container, manifest, config or budget invariant failed
    4  missing file
    5  runtime failure inside a stage
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_MISSING = 4
EXIT_RUNTIME = 5

log = logging.getLogger("jcdp")


class UsageError(Exception):
    pass


class SchemaError(Exception):
    def __init__(self, invariant: str, message: str, problems=()):
        super().__init__(message)
        self.invariant = invariant
        self.problems = list(problems)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _need(args, *names) -> None:
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required option(s): " +
                         ", ".join("--" + n.replace("_", "-") for n in missing))


def _relpath(target, start) -> str:
    return os.path.relpath(Path(target).resolve(), Path(start).resolve())


# -- subcommands -------------------------------------------------------------


def cmd_gen_toy_data(args):
    from .data import save_dataset
    from .toydata import make_benchmark

    _need(args, "out")
    splits = make_benchmark(args.seed, args.n_train, args.n_test, args.n_surrogate,
                            args.size, args.surrogate)
    save_dataset(args.out, splits, name="shapes", extra={"surrogate": args.surrogate})
    return {"out": str(args.out), "splits": {k: len(v) for k, v in splits.items()}}


def cmd_forge_ue(args):
    from .data import load_dataset, save_dataset
    from .forge import PerturbationBudget, forge

    _need(args, "clean", "out", "kind")
    clean = load_dataset(args.clean, args.split)
    budget = None
    if args.epsilon is not None or args.norm is not None:
        norm = args.norm or ("l2" if args.kind == "lsp" else "l_inf")
        eps = args.epsilon if args.epsilon is not None else (1.0 if norm == "l2" else 8 / 255)
        budget = PerturbationBudget(norm, eps)
    kw = {}
    if args.kind.startswith("emn"):
        kw = {"outer_steps": args.outer_steps, "inner_steps": args.inner_steps}
    elif args.kind == "lsp":
        kw = {"patch_size": args.patch_size}
    ue = forge(clean, args.kind, seed=args.seed, budget=budget, **kw)
    ue.provenance[-1]["source_path"] = _relpath(args.clean, args.out)
    ue.provenance[-1]["source_split"] = args.split
    save_dataset(args.out, {"train": ue}, extra={
        "noise_kind": ue.noise_kind, "budget": ue.budget.to_dict(), "seed": ue.seed,
        "clean_ref": ue.clean_ref,
    })
    return {"out": str(args.out), "noise_kind": ue.noise_kind, "count": len(ue)}


def cmd_train_ddpm(args):
    from .data import load_dataset
    from .denoiser import DenoiserSpec, save_checkpoint, train_ddpm
    from .schedule import desk_schedule

    _need(args, "data", "out")
    data = load_dataset(args.data, args.split)
    spec = DenoiserSpec(channels=data.image_shape[0], base_width=args.width,
                        resolution=data.image_shape[1])
    state = train_ddpm(data, spec, desk_schedule(args.T, args.variance_mode), args.steps,
                       args.batch_size, args.seed, args.lr)
    save_checkpoint(state, args.out)
    return {"out": str(args.out), "step": state.step,
            "final_loss": state.loss_history[-1][1] if state.loss_history else None}


def cmd_finetune_ddpm(args):
    from .data import load_dataset
    from .denoiser import finetune_ddpm, save_checkpoint

    _need(args, "source", "data", "out")
    data = load_dataset(args.data, args.split)
    state = finetune_ddpm(args.source, data, args.steps, args.lr_scale, args.seed,
                          args.batch_size)
    save_checkpoint(state, args.out)
    return {"out": str(args.out), "step": state.step,
            "final_loss": state.loss_history[-1][1] if state.loss_history else None}


def cmd_train_extractor(args):
    from .data import load_dataset
    from .perceptual import rotation_accuracy, save_extractor, train_extractor

    _need(args, "data", "out")
    data = load_dataset(args.data, args.split)
    phi = train_extractor(data, args.labels, args.steps, args.seed, width=args.width)
    save_extractor(phi, args.out)
    out = {"out": str(args.out), "steps": phi.steps}
    if args.labels == "rotation":
        out["rotation_accuracy"] = rotation_accuracy(phi, data)
    return out


def cmd_purify(args):
    from .container import atomic_write_text, sha256_file
    from .data import load_dataset, save_dataset
    from .denoiser import load_checkpoint
    from .perceptual import load_extractor
    from .purify import GuidanceParams, purify

    _need(args, "ue", "ddpm", "out")
    ue = load_dataset(args.ue, args.split)
    state = load_checkpoint(args.ddpm)
    params = GuidanceParams(args.lambda1, args.lambda2, args.T_p, args.N, args.condition_mode)
    phi = None
    if not args.unconditional and params.lambda2 != 0:
        _need(args, "extractor")
        phi = load_extractor(args.extractor)
    images, trace = purify(state, phi, ue.images, params, seed=args.seed,
                           unconditional=args.unconditional, batch_size=args.batch_size)
    le = ue.with_images(images, name=f"{ue.name}-le", provenance_entry={
        "stage": "purify",
        "source": ue.name,
        "source_path": _relpath(args.ue, args.out),
        "source_split": args.split,
        "source_content_id": ue.content_id(),
        "ddpm_checkpoint": sha256_file(Path(args.ddpm) / "manifest.json")[:16],
        "ddpm_trained_on": state.trained_on,
        "guidance": params.to_dict(),
        "unconditional": bool(args.unconditional),
        "seed": args.seed,
    })
    save_dataset(args.out, {"train": le})
    if args.trace:
        atomic_write_text(args.trace, trace.to_csv())
    return {"out": str(args.out), "count": len(le), "content_id": le.content_id()}


def cmd_train_classifier(args):
    from .classify import ClassifierSpec, save_classifier, train_classifier
    from .data import load_dataset

    _need(args, "data", "out")
    data = load_dataset(args.data, args.split)
    test = load_dataset(args.test, args.test_split) if args.test else None
    spec = ClassifierSpec(width=args.width, epochs=args.epochs, batch_size=args.batch_size,
                          lr=args.lr, seed=args.seed)
    k = len(test.class_names) if test is not None and test.class_names else None
    model, curve = train_classifier(data, spec, test, num_classes=k)
    save_classifier(model, spec, args.out, curve, data.content_id())
    return {"out": str(args.out), "accuracy_curve": curve}


def cmd_evaluate(args):
    from .classify import evaluate, load_classifier
    from .data import load_dataset

    _need(args, "model", "data")
    model, _ = load_classifier(args.model)
    test = load_dataset(args.data, args.split)
    return {"accuracy": evaluate(model, test), "count": len(test)}


def _pipeline_config(args):
    from .harness import PipelineConfig

    d = {f.name: getattr(args, f.name) for f in fields(PipelineConfig)}
    try:
        return PipelineConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise SchemaError("config", str(exc)) from exc


def _write_experiment_outputs(cfg, wb, record, out: Path, figures: bool):
    from .container import atomic_write_text, write_tensor
    from .purify import psnr

    record.save(out)
    bench = wb.benchmark(cfg)
    clean = bench["train"].images
    hist = {"ue": psnr(wb.unlearnable(cfg).images, clean)}
    if cfg.purify and "purified" in record.arms:
        hist["purified"] = psnr(wb.purified(cfg).images, clean)
        trace = wb.trace_for(cfg)
        if trace is not None:
            atomic_write_text(out / "trace.csv", trace.to_csv())
    for arm, vals in hist.items():
        write_tensor(out / f"psnr_{arm}.jcdp", vals.astype(np.float32))
    if figures:
        _render_record_figures([record], out, out / "figures")


def _render_record_figures(records, src: Path, dest: Path) -> list[str]:
    from .container import read_tensor
    from . import plotting

    written = [plotting.accuracy_bars(records, dest / "accuracy.png")]
    for rec in records:
        rdir = src / rec.name if (src / rec.name / "record.json").exists() else src
        if any("accuracy_curve" in m for m in rec.arms.values()):
            written.append(plotting.accuracy_curves(rec, dest / f"{rec.name}_curves.png"))
        hist = {}
        for arm in ("ue", "purified"):
            p = rdir / f"psnr_{arm}.jcdp"
            if p.exists():
                hist[arm] = read_tensor(p)
        if hist:
            written.append(plotting.psnr_histogram(hist, dest / f"{rec.name}_psnr.png"))
        if (rdir / "trace.csv").exists():
            written.append(plotting.guidance_trace((rdir / "trace.csv").read_text(),
                                                   dest / f"{rec.name}_guidance.png"))
    return [str(p) for p in written]


def cmd_experiment(args):
    from .harness import PipelineError, Workbench, monotone_sane, run_pipeline

    _need(args, "out")
    cfg = _pipeline_config(args)
    wb = Workbench()
    out = Path(args.out)
    try:
        record = run_pipeline(cfg, wb, name=args.name)
    except PipelineError as exc:
        exc.record.save(out)
        raise
    record.extra["config_file"] = args.config or ""
    _write_experiment_outputs(cfg, wb, record, out, not args.no_figures)
    result = {"out": str(out), "accuracy": {a: m["final_accuracy"]
                                           for a, m in record.arms.items()}}
    if "purified" in record.arms:
        result["monotone_sane"] = monotone_sane(record)
    return result


def cmd_ablation(args):
    from .container import atomic_write_text, write_json
    from .harness import PipelineConfig, Workbench, ablation_summary, run_ablation

    _need(args, "out")
    cfg = _pipeline_config(args)
    wb = Workbench()
    out = Path(args.out)
    records = run_ablation(cfg, wb)
    table = ["record,arm,metric,value"]
    for rec in records:
        rec.extra["config_file"] = args.config or ""
        rec.save(out / rec.name)
        table.extend(rec.metrics_csv().splitlines()[1:])
        rec_cfg = PipelineConfig.from_dict(rec.config)
        if not rec.name.startswith("sweep") and not rec_cfg.unconditional:
            trace = wb.trace_for(rec_cfg)
            if trace is not None:
                atomic_write_text(out / rec.name / "trace.csv", trace.to_csv())
    atomic_write_text(out / "metrics.csv", "\n".join(table) + "\n")
    summary = ablation_summary(records)
    write_json(out / "summary.json", summary)
    if not args.no_figures:
        _render_record_figures([r for r in records if not r.name.startswith("sweep")],
                               out, out / "figures")
    return {"out": str(out), "records": [r.name for r in records], "summary": summary}


def cmd_plot(args):
    from .harness import ExperimentRecord

    _need(args, "record")
    src = Path(args.record)
    if (src / "record.json").exists():
        records = [ExperimentRecord.load(src)]
    else:
        records = [ExperimentRecord.load(p.parent) for p in sorted(src.glob("*/record.json"))]
        records = [r for r in records if not r.name.startswith("sweep")]
    if not records:
        raise FileNotFoundError(f"no record.json under {src}")
    dest = Path(args.out) if args.out else src / "figures"
    return {"figures": _render_record_figures(records, src, dest)}


def _validate_path(path: Path) -> dict:
    from .classify import load_classifier
    from .container import ContainerError, read_json, read_tensor
    from .data import validate_dataset
    from .denoiser import load_checkpoint
    from .harness import ExperimentRecord
    from .perceptual import load_extractor

    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    if path.is_file():
        try:
            arr = read_tensor(path)
        except ContainerError as exc:
            raise SchemaError(exc.invariant, f"{path}: {exc}") from exc
        return {"kind": "tensor", "shape": list(arr.shape), "dtype": str(arr.dtype)}
    if (path / "record.json").exists():
        rec = ExperimentRecord.load(path)
        if (path / "metrics.csv").read_text() != rec.metrics_csv():
            raise SchemaError("record_completeness", "metrics.csv differs from record.json")
        return {"kind": "record", "name": rec.name}
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    kind = read_json(path / "manifest.json").get("kind")
    if kind == "dataset":
        problems = validate_dataset(path)
        if problems:
            invariant = problems[0].split(": ")[1] if ": " in problems[0] else "dataset"
            raise SchemaError(invariant, problems[0], problems)
        return {"kind": "dataset"}
    loaders = {"ddpm": load_checkpoint, "extractor": load_extractor,
               "classifier": load_classifier}
    if kind not in loaders:
        raise SchemaError("manifest_kind", f"unknown manifest kind {kind!r}")
    try:
        loaders[kind](path)
        for f in sorted(path.rglob("*.jcdp")):
            read_tensor(f)
    except ContainerError as exc:
        raise SchemaError(exc.invariant, str(exc)) from exc
    return {"kind": kind}


def cmd_validate(args):
    _need(args, "path")
    return {"valid": True, **_validate_path(Path(args.path))}


def cmd_png_export(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data import load_dataset

    _need(args, "data", "out")
    data = load_dataset(args.data, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(data) if args.count is None else min(args.count, len(data))
    for i in range(n):
        img = np.clip(data.images[i].transpose(1, 2, 0), 0, 1)
        plt.imsave(out / f"{args.split}_{i:05d}_y{data.labels[i]}.png", img)
    return {"out": str(out), "count": n}


# -- parser ------------------------------------------------------------------


def _add_pipeline_flags(p):
    from .harness import PipelineConfig

    defaults = PipelineConfig()
    for f in fields(PipelineConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        value = getattr(defaults, f.name)
        if isinstance(value, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=value)
        elif f.name == "sweep":
            p.add_argument(flag, dest=f.name, type=json.loads, default=value,
                           help='JSON list of [N, T_p] pairs, e.g. "[[4,10],[1,40]]"')
        else:
            p.add_argument(flag, dest=f.name, type=type(value), default=value)
    p.add_argument("--out", type=Path)
    p.add_argument("--no-figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    from .forge import NOISE_KINDS
    from .purify import CONDITION_MODES
    from .schedule import VARIANCE_MODES

    parser = _Parser(prog="jcdp", description="Unlearnable-example purification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, stochastic=True, help=None):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="JSON file of option values")
        if stochastic:
            p.add_argument("--seed", type=int, required=True)
        return p

    p = command("gen-toy-data", cmd_gen_toy_data, help="generate the shapes benchmark")
    p.add_argument("--out", type=Path)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--n-surrogate", type=int, default=1000)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--surrogate", choices=("match", "mismatch"), default="match")

    p = command("forge-ue", cmd_forge_ue, help="forge an unlearnable dataset")
    p.add_argument("--clean", type=Path)
    p.add_argument("--split", default="train")
    p.add_argument("--out", type=Path)
    p.add_argument("--kind", choices=NOISE_KINDS)
    p.add_argument("--norm", choices=("l_inf", "l2"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--outer-steps", type=int, default=10)
    p.add_argument("--inner-steps", type=int, default=20)
    p.add_argument("--patch-size", type=int, default=4)

    p = command("train-ddpm", cmd_train_ddpm, help="train a DDPM on surrogate data")
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="surrogate")
    p.add_argument("--out", type=Path)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--variance-mode", choices=VARIANCE_MODES, default="posterior")

    p = command("finetune-ddpm", cmd_finetune_ddpm, help="fine-tune a DDPM checkpoint")
    p.add_argument("--source", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="surrogate")
    p.add_argument("--out", type=Path)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr-scale", type=float, default=1.0)

    p = command("train-extractor", cmd_train_extractor, help="train the perceptual features")
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="surrogate")
    p.add_argument("--out", type=Path)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--labels", choices=("rotation", "labels"), default="rotation")

    p = command("purify", cmd_purify, help="purify an unlearnable dataset")
    p.add_argument("--ue", type=Path)
    p.add_argument("--split", default="train")
    p.add_argument("--ddpm", type=Path)
    p.add_argument("--extractor", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--trace", type=Path, help="write the per-step guidance trace CSV here")
    p.add_argument("--lambda1", type=float, default=1e4)
    p.add_argument("--lambda2", type=float, default=10.0)
    p.add_argument("--T-p", dest="T_p", type=int, default=15)
    p.add_argument("--N", type=int, default=4)
    p.add_argument("--condition-mode", choices=CONDITION_MODES, default="fresh_noise")
    p.add_argument("--unconditional", action="store_true")
    p.add_argument("--batch-size", type=int, default=250)

    p = command("train-classifier", cmd_train_classifier, help="train the convnet classifier")
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="train")
    p.add_argument("--test", type=Path, help="dataset whose test split is tracked per epoch")
    p.add_argument("--test-split", default="test")
    p.add_argument("--out", type=Path)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", type=int, default=64)

    p = command("evaluate", cmd_evaluate, stochastic=False, help="clean-test accuracy")
    p.add_argument("--model", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="test")

    p = command("experiment", cmd_experiment, help="clean / UE / purified pipeline")
    _add_pipeline_flags(p)
    p.add_argument("--name", default="pipeline")

    p = command("ablation", cmd_ablation, help="fine-tune x joint-conditioning ablation")
    _add_pipeline_flags(p)

    p = command("plot", cmd_plot, stochastic=False, help="render figures for saved records")
    p.add_argument("--record", type=Path)
    p.add_argument("--out", type=Path)

    p = command("validate", cmd_validate, stochastic=False,
                help="check a container, dataset (with provenance chain), checkpoint or record")
    p.add_argument("path", nargs="?", type=Path)

    p = command("png-export", cmd_png_export, stochastic=False,
                help="write dataset images as PNG files for inspection")
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="train")
    p.add_argument("--out", type=Path)
    p.add_argument("--count", type=int)
    return parser


def _apply_config_file(parser, argv):
    """Parse, then re-parse with the config file's values as defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("config", f"{path}: {exc}") from exc
    if not isinstance(values, dict):
        raise SchemaError("config", f"{path}: expected a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in subparser._actions} - {"help", "config", "func"}
    unknown = sorted(set(values) - dests)
    if unknown:
        raise SchemaError("config", f"unknown config keys for {args.command}: {unknown}")
    for action in subparser._actions:
        if action.dest in values and action.type is Path:
            values[action.dest] = Path(values[action.dest])
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    from .container import ContainerError
    from .forge import BudgetViolation
    from .harness import PipelineError

    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = args.func(args)
        _emit({"ok": True, "command": args.command, **(result or {})})
        return EXIT_OK
    except UsageError as exc:
        err = {"error": "usage", "code": EXIT_USAGE, "message": str(exc)}
    except SchemaError as exc:
        err = {"error": "schema", "code": EXIT_SCHEMA, "invariant": exc.invariant,
               "message": str(exc)}
        if exc.problems:
            err["problems"] = exc.problems
    except ContainerError as exc:
        err = {"error": "schema", "code": EXIT_SCHEMA, "invariant": exc.invariant,
               "message": str(exc)}
    except BudgetViolation as exc:
        err = {"error": "schema", "code": EXIT_SCHEMA, "invariant": "budget",
               "message": str(exc)}
    except FileNotFoundError as exc:
        err = {"error": "missing_file", "code": EXIT_MISSING, "message": str(exc)}
    except PipelineError as exc:
        err = {"error": "runtime", "code": EXIT_RUNTIME, "stage": exc.record.failed_stage,
               "message": str(exc)}
    except (ValueError, KeyError) as exc:
        err = {"error": "schema", "code": EXIT_SCHEMA, "invariant": "argument",
               "message": str(exc)}
    except Exception as exc:  # noqa: BLE001
        err = {"error": "runtime", "code": EXIT_RUNTIME,
               "message": f"{type(exc).__name__}: {exc}"}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return err["code"]


if __name__ == "__main__":
    sys.exit(main())
