"""Command-line entry points: make-dataset, train, reconstruct, generate, evaluate, grad-check.

Exit status is 0 on success, 1 for usage or input errors and 2 for numeric
failures (aborted training, failed gradient checks).
"""

from __future__ import annotations

import os

# deterministic mode: single-threaded BLAS unless the caller chose otherwise
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import autodiff as ad  # noqa: E402

log = logging.getLogger("objvid3d")

OK, USAGE, NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE, f"{self.prog}: error: {message}\n")


def _print_block(title: str, payload: dict) -> None:
    """Delimited, machine-readable block on stdout."""
    print(f"=== {title} ===")
    print(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))
    print(f"=== end {title} ===")


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serialisable: {type(v)}")


def _nan_to_none(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise UsageError(f"config file {path} not found") from err
    except json.JSONDecodeError as err:
        raise UsageError(f"config file {path} is not valid JSON: {err}") from err


# -- make-dataset -----------------------------------------------------------


def cmd_make_dataset(args) -> int:
    from .data import DatasetConfig, generate_dataset, manifest_hash

    overrides = _read_json(args.config) if args.config else {}
    if args.count is not None:
        overrides["count"] = args.count
    try:
        cfg = DatasetConfig.toy(**overrides) if args.toy else DatasetConfig(**overrides)
    except TypeError as err:
        raise UsageError(f"bad dataset config: {err}") from err
    out = Path(args.out or "data")
    manifest = generate_dataset(cfg, args.seed, out)
    _print_block(
        "dataset",
        {
            "path": str(out),
            "sequences": len(manifest["sequences"]),
            "splits": {k: len(v) for k, v in manifest["splits"].items()},
            "seed": args.seed,
            "manifest_sha256": manifest_hash(out),
        },
    )
    return OK


# -- train ------------------------------------------------------------------


def _run_config(args):
    from .data import load_manifest
    from .model import RunConfig

    raw = _read_json(args.config) if args.config else None
    try:
        run = RunConfig.from_dict(raw) if raw is not None else (RunConfig.toy() if args.toy else RunConfig())
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad run config: {err}") from err
    if args.dataset:
        run.dataset = args.dataset
    if args.seed is not None:
        run.seed = args.seed
    if args.steps is not None:
        run.steps = args.steps
    if args.out:
        run.out = args.out
    manifest = load_manifest(run.dataset)
    if raw is None or "model" not in raw:
        # image geometry follows the dataset unless a config pins it
        dcfg = manifest["config"]
        run.model = dataclasses.replace(run.model, height=dcfg["height"], width=dcfg["width"], fov_y=dcfg["fov_y"],
                                        frames=min(run.model.frames, dcfg["length"]))
    return run


def cmd_train(args) -> int:
    from .data import load_split
    from .plotting import plot_loss_curves
    from .train import Trainer

    run = _run_config(args)
    _, records = load_split(run.dataset, args.split or "train")
    out = Path(run.out)
    if (out / "latest").exists():
        trainer = Trainer.resume(out, records, run)
        log.info("resuming %s at step %d", out, trainer.step)
    else:
        trainer = Trainer(run, records, out)

    def progress(step, values, elapsed):
        log.info("step %d total %.4f nll %.4f kl %.4f (%.0fs)", step, values["total"], values["nll"], values["kl"], elapsed)

    ckpt = trainer.fit(progress=progress)
    plot_loss_curves(out / "loss.csv", out / "loss.png")
    _print_block(
        "train",
        {"out": str(out), "steps": trainer.step, "checkpoint": str(ckpt) if ckpt else None,
         "skipped_steps": trainer.skipped, "loss_log": str(out / "loss.csv")},
    )
    return OK


# -- checkpoints and outputs ------------------------------------------------


def _load_checkpoint(path):
    from .model import RunConfig, SceneModel

    p = Path(path)
    if (p / "latest").exists():
        p = p / "checkpoints" / (p / "latest").read_text().strip()
    if not (p / "model.json").exists():
        raise UsageError(f"{path} is not a checkpoint (no model.json)")
    model, meta = SceneModel.load(p)
    run = RunConfig.from_dict(meta["run"]) if "run" in meta else RunConfig(model=model.cfg)
    return model, run, p


def _dump_prediction(directory: Path, pred, target=None, title=None) -> None:
    from .autodiff import container
    from .mesh import write_ppm
    from .plotting import save_panels

    directory.mkdir(parents=True, exist_ok=True)
    for f in range(len(pred.rgb)):
        if target is not None:
            write_ppm(directory / f"frame{f:02d}_input.ppm", target[f])
        write_ppm(directory / f"frame{f:02d}_reconstruction.ppm", pred.rgb[f])
        write_ppm(directory / f"frame{f:02d}_background.ppm", pred.background[f])
        write_ppm(directory / f"frame{f:02d}_objects.ppm", pred.objects[f])
    container.save(directory / "masks.o3vt", pred.masks.astype(np.uint8))
    container.save(directory / "depth.o3vt", pred.depth.astype(np.float32))
    boxes = [{"frame": d.frame, "lo": d.box.lo.tolist(), "hi": d.box.hi.tolist(), "score": d.score} for d in pred.boxes]
    (directory / "boxes.json").write_text(json.dumps({"boxes": boxes, "presence": pred.presence.tolist()}, indent=1))
    save_panels(directory / "panels.png", pred, target, title)


def _require_compatible(model, run, records) -> None:
    from .train import check_compatible

    try:
        check_compatible(dataclasses.replace(run, model=model.cfg, render_frames=None), records)
    except ValueError as err:
        raise UsageError(str(err)) from err


def _dataset_path(args, run) -> str:
    return args.dataset or run.dataset


def cmd_reconstruct(args) -> int:
    from .data import load_split
    from .evaluate import reconstruct

    model, run, ckpt = _load_checkpoint(args.checkpoint)
    names, records = load_split(_dataset_path(args, run), args.split or "test", strict=False)
    if args.count is not None:
        names, records = names[: args.count], records[: args.count]
    _require_compatible(model, run, records)
    out = Path(args.out or "reconstructions")
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.json")
    preds = reconstruct(model, records)
    for name, pred, rec in zip(names, preds, records):
        _dump_prediction(out / name, pred, rec.frames[: model.cfg.frames], title=name)
    _print_block("reconstruct", {"checkpoint": str(ckpt), "out": str(out), "sequences": names})
    return OK


def cmd_generate(args) -> int:
    from .data import DatasetConfig, orbit_track
    from .evaluate import generate

    model, run, ckpt = _load_checkpoint(args.checkpoint)
    cfg = model.cfg
    count = args.count if args.count is not None else 16
    seed = args.seed if args.seed is not None else 0
    dcfg = DatasetConfig(count=1, length=cfg.frames, height=cfg.height, width=cfg.width, fov_y=cfg.fov_y)
    rng = np.random.default_rng([seed, 99])
    cams = [orbit_track(dcfg, rng)[0].rebased(0, cfg.frames) for _ in range(count)]
    z, preds = generate(model, cams, seed)
    out = Path(args.out or "samples")
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.json")
    rows = []
    for i, pred in enumerate(preds):
        _dump_prediction(out / f"sample_{i:03d}", pred, title=f"sample {i}")
        rows.append({"sample": i, "presence": np.round(pred.presence, 4).tolist(),
                     "rgb_min": float(pred.rgb.min()), "rgb_max": float(pred.rgb.max()),
                     "depth_finite": bool(np.isfinite(pred.depth).all())})
    (out / "samples.json").write_text(json.dumps(rows, indent=1))
    _print_block("generate", {"checkpoint": str(ckpt), "out": str(out), "seed": seed, "samples": rows})
    return OK


def cmd_evaluate(args) -> int:
    from .data import load_split
    from .evaluate import evaluate_predictions, reconstruct
    from .metrics import write_report
    from .plotting import plot_metrics

    model, run, ckpt = _load_checkpoint(args.checkpoint)
    split = args.split or "test"
    names, records = load_split(_dataset_path(args, run), split, strict=False)
    if not records:
        raise UsageError(f"split {split!r} is empty")
    if args.count is not None:
        names, records = names[: args.count], records[: args.count]
    _require_compatible(model, run, records)
    preds = reconstruct(model, records)
    rows, summary = evaluate_predictions(preds, records, names)
    out = Path(args.out or "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.json")
    write_report(out, summary, rows)
    plot_metrics(summary, out / "metrics.png")
    unavailable = sorted(k for k, v in summary.items() if isinstance(v, float) and math.isnan(v))
    _print_block("metrics", {"checkpoint": str(ckpt), "split": split, "sequences": len(rows),
                             "metrics": _nan_to_none(summary), "unavailable": unavailable})
    return OK


def cmd_grad_check(args) -> int:
    from .gradcheck_suite import COMPONENTS, TOLERANCE, run_suite

    scope = args.scope.split(",") if args.scope else list(COMPONENTS)
    try:
        results = run_suite(scope, seed=args.seed or 0)
    except ValueError as err:
        raise UsageError(str(err)) from err
    per_component = {}
    for r in results:
        c = per_component.setdefault(r.component, {"max_rel_error": 0.0, "passed": True, "failed": []})
        c["max_rel_error"] = max(c["max_rel_error"], r.error)
        if not r.passed:
            c["passed"] = False
            c["failed"].append(r.name)
    print("component,check,max_rel_error,status")
    for r in results:
        print(f"{r.component},{r.name},{r.error:.3e},{'pass' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    _print_block("grad-check", {"tolerance": TOLERANCE, "components": per_component, "passed": ok})
    return OK if ok else NUMERIC


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="objvid3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-dataset", help="generate the synthetic rooms dataset")
    s.add_argument("--config", help="JSON file of DatasetConfig fields")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--count", type=int)
    s.add_argument("--toy", action="store_true", help="start from the toy preset (4 sequences, <=2 objects)")
    s.set_defaults(fn=cmd_make_dataset)

    s = sub.add_parser("train", help="train (or resume) a model")
    s.add_argument("--config", help="JSON RunConfig")
    s.add_argument("--dataset")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--out")
    s.add_argument("--split", default="train")
    s.add_argument("--toy", action="store_true", help="start from the toy RunConfig preset")
    s.set_defaults(fn=cmd_train)

    for name, fn, helptext in (
        ("reconstruct", cmd_reconstruct, "dump reconstructions and decompositions"),
        ("evaluate", cmd_evaluate, "compute the metric report on a split"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("checkpoint", help="checkpoint directory or run directory")
        s.add_argument("--dataset")
        s.add_argument("--split")
        s.add_argument("--out")
        s.add_argument("--count", type=int)
        s.set_defaults(fn=fn)

    s = sub.add_parser("generate", help="decode and render prior samples")
    s.add_argument("checkpoint")
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("grad-check", help="finite-difference checks of every differentiable component")
    s.add_argument("--scope", help="comma-separated components (default: all)")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None) -> int:
    from .train import ConfigMismatch, TrainingAborted

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (TrainingAborted, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return NUMERIC
    except (UsageError, ConfigMismatch, FileNotFoundError, ValueError, ad.ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
