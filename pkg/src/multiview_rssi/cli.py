"""Batch command surface: ``gen``, ``preprocess``, ``train``, ``eval`` and ``analyze``.

Every command writes its producing configuration next to its outputs
(in the JSON body, checkpoint header, or a ``<file>.meta.json`` sidecar for
CSVs). Exit status is 0 on success, 1 on runtime errors and 2 on invalid
arguments or configuration.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, dataset, metrics, models, rssi, training
from .encoder import EncoderConfig
from .scene import SceneError, SceneSpec
from .tensor import DimensionError

log = logging.getLogger("multiview_rssi")

MODEL_KEYS = {f for f in EncoderConfig.__dataclass_fields__} | {
    "fusion_depth", "fusion_ffn_ratio", "twdnn_blocks", "twdnn_hidden", "head_hidden", "camera", "init"}


class UsageError(Exception):
    """Bad flags or configuration; carries every problem found."""

    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _sidecar(path, obj) -> None:
    _dump(Path(str(path) + ".meta.json"), obj)


def _provenance(args, **extra) -> dict:
    d = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return {"tool": "multiview-rssi", "version": __version__, "args": d, **extra}


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    try:
        spec = SceneSpec.load(args.scene) if args.scene else SceneSpec()
    except (OSError, json.JSONDecodeError, TypeError, SceneError) as exc:
        raise UsageError(f"scene file {args.scene}: {exc}") from None
    if args.frames < 1:
        raise UsageError("--frames must be at least 1")
    paired = dataset.generate_dataset(spec, args.frames, args.out, seed=args.seed)
    counts = {s: int((paired.split == s).sum()) for s in training.SPLITS}
    print(f"wrote {args.frames} frames x {len(spec.cameras)} cameras to {args.out}")
    print(f"samples {len(paired)} (dropped {paired.dropped}); "
          + " ".join(f"{k} {v}" for k, v in counts.items()))
    return 0


# ---------------------------------------------------------------- preprocess


def cmd_preprocess(args) -> int:
    problems = []
    if args.rate_out * 2 != args.rate_in:
        problems.append(f"--rate-out must be half of --rate-in (pair averaging), got {args.rate_in} -> {args.rate_out}")
    if args.mad_window < 2:
        problems.append("--mad-window must be at least 2")
    if args.mad_threshold <= 0:
        problems.append("--mad-threshold must be positive")
    if args.smooth < 1:
        problems.append("--smooth must be at least 1")
    if problems:
        raise UsageError(problems)
    trace = rssi.read_rssi_csv(args.rssi, rate=args.rate_in)
    res = rssi.preprocess(trace, args.mad_window, args.mad_threshold, args.smooth)
    rssi.write_rssi_csv(args.out, res.trace)
    lo, hi = res.trend.band
    summary = {"samples_in": len(trace), "samples_out": len(res.trace),
               "outliers": int(res.outliers.sum()), "trend_r": res.trend.r, "band": [lo, hi],
               "status": res.trend.status}
    _sidecar(args.out, _provenance(args, result=summary))
    print(f"trend_check r = {res.trend.r:.4f} (band [{lo:.2f}, {hi:.2f}]: {res.trend.status})")
    print(f"{len(trace)} samples at {args.rate_in:g} Hz -> {len(res.trace)} at {args.rate_out:g} Hz; "
          f"{summary['outliers']} outliers replaced")
    if res.trend.status == "warn":
        log.warning("trend correlation outside the expected band; check smoothing strength")
    return 0


# ---------------------------------------------------------------- train


def _read_json(path, what, problems):
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        problems.append(f"{what} {path}: {exc}")
        return {}
    if not isinstance(obj, dict):
        problems.append(f"{what} {path}: expected a JSON object")
        return {}
    return obj


def build_run(model_name: str, cfg_dict: dict, frame_shape=None, seed=None):
    """Resolve ``(spec, TrainConfig, init)`` from a config object, listing every problem."""
    problems = []
    unknown = sorted(set(cfg_dict) - {"train", "model"})
    if unknown:
        problems.append(f"unknown config sections: {', '.join(unknown)}")
    tcfg_d = dict(cfg_dict.get("train", {}))
    mcfg = dict(cfg_dict.get("model", {}))
    if seed is not None:
        tcfg_d["seed"] = seed
    bad = sorted(set(tcfg_d) - set(training.TrainConfig.__dataclass_fields__))
    if bad:
        problems.append(f"unknown train keys: {', '.join(bad)}")
    tcfg = None
    try:
        tcfg = training.TrainConfig.from_dict({k: v for k, v in tcfg_d.items() if k not in bad})
        problems.extend(tcfg.problems())
    except (TypeError, ValueError) as exc:
        problems.append(f"train config: {exc}")
    bad = sorted(set(mcfg) - MODEL_KEYS)
    if bad:
        problems.append(f"unknown model keys: {', '.join(bad)}")
    init = mcfg.pop("init", "vit")
    if init not in ("vit", "xavier"):
        problems.append(f"model.init must be 'vit' or 'xavier', got {init!r}")
    overrides = {k: v for k, v in mcfg.items() if k not in bad}
    if frame_shape is not None:
        overrides.setdefault("channels", frame_shape[0])
        overrides.setdefault("image_height", frame_shape[1])
        overrides.setdefault("image_width", frame_shape[2])
    spec = None
    try:
        spec = models.preset(model_name, **overrides)
    except (models.SpecError, DimensionError, TypeError, ValueError) as exc:
        problems.append(f"model: {exc}")
    if problems:
        raise UsageError(problems)
    return spec, tcfg, init


def describe(spec: models.ModelSpec) -> str:
    e = spec.encoders[0]
    parts = [f"model {spec.variant.replace('_', '-')}:", f"D={e.embed_dim}", f"L={e.depth}",
             f"heads={e.heads}", f"P={e.patch_size}", f"image={e.image_height}x{e.image_width}"]
    if spec.variant == "mulvit_tf":
        parts.append(f"L'={spec.fusion_depth}")
    elif spec.variant == "mulvit_twdnn":
        parts.append(f"twdnn={spec.twdnn_blocks}x{spec.twdnn_hidden}")
    else:
        parts.append(f"camera={spec.camera}")
    parts.append(f"head={spec.head_hidden}")
    return " ".join(parts)


HISTORY_FIELDS = ("epoch", "phase", "phase_epoch", "lr", "train_loss", "val_loss", "val_rmse_db")


def cmd_train(args) -> int:
    problems = []
    cfg_dict = _read_json(args.config, "config", problems)
    root = dataset.resolve_root(args.data)
    if not (root / "manifest.json").exists():
        problems.append(f"--data {args.data}: no manifest.json found")
    if problems:
        # report the rest of the config too before giving up
        try:
            build_run(args.model, cfg_dict, seed=args.seed)
        except UsageError as exc:
            problems.extend(exc.problems)
        raise UsageError(problems)
    ds, images = dataset.load_dataset(root)
    spec, tcfg, init = build_run(args.model, cfg_dict, images.shape[2:], seed=args.seed)
    if images.shape[1] < spec.cameras or (not spec.multi_view and spec.camera >= images.shape[1]):
        raise UsageError(f"dataset has {images.shape[1]} cameras; {spec.variant} needs "
                         f"{spec.cameras if spec.multi_view else spec.camera + 1}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(describe(spec))
    cost = analysis.cost_report(spec)
    print(f"cost {cost.summary()} ({cost.params} params, {cost.flops} FLOPs); init {init}; "
          f"epochs {tcfg.phase1_epochs}+{tcfg.phase2_epochs}; lr {tcfg.base_lr:g}; seed {tcfg.seed}")
    data = training.TrainData.from_paired(ds, images)
    print(" ".join(f"{s} {data.idx(s).size}" for s in training.SPLITS))
    params = models.init_params(spec, seed=tcfg.seed, init=init)
    res = training.train(spec, params, data, tcfg, state_path=out / "state.ckpt",
                         resume_from=args.resume, verbose=True)
    run_cfg = {"model": args.model, "init": init, "data": str(args.data), "spec": spec.to_dict(),
               "train": tcfg.to_dict()}
    training.save_model(out / "model.ckpt", spec, res.params, res.normalizer, tcfg,
                        {"best_epoch": res.best_epoch, "run": run_cfg})
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(res.history)
    _sidecar(out / "history.csv", _provenance(args, run=run_cfg))
    summary = {"best_epoch": res.best_epoch, "best_val_rmse_db": res.best_val_rmse,
               "normalizer": {"mean": res.normalizer.mean, "std": res.normalizer.std}}
    _dump(out / "run.json", _provenance(args, run=run_cfg, result=summary))
    print(f"best epoch {res.best_epoch}: val rmse {res.best_val_rmse:.3f} dB -> {out / 'model.ckpt'}")
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    if args.split not in training.SPLITS + ("all",):
        raise UsageError(f"--split must be one of {', '.join(training.SPLITS)}, all")
    spec, params, normalizer, header = training.load_model(args.ckpt)
    ds, images = dataset.load_dataset(args.data)
    e = spec.encoders[0]
    want = (e.channels, e.image_height, e.image_width)
    if images.shape[2:] != want:
        raise UsageError(f"checkpoint expects frames {want}, dataset has {images.shape[2:]}")
    needed = spec.cameras if spec.multi_view else spec.camera + 1
    if images.shape[1] < needed:
        raise UsageError(f"checkpoint needs {needed} cameras, dataset has {images.shape[1]}")
    idx = np.arange(len(ds)) if args.split == "all" else ds.indices(args.split)
    if idx.size == 0:
        raise UsageError(f"split {args.split!r} is empty in {args.data}")
    pred, rep = training.evaluate(spec, params, images[idx], ds.labels[idx], normalizer, args.threshold)
    cfg = {"spec": spec.to_dict(), "normalizer": {"mean": normalizer.mean, "std": normalizer.std}}
    _dump(args.report, _provenance(args, metrics=rep.to_dict(), checkpoint=cfg))
    if args.cdf:
        metrics.write_cdf_csv(args.cdf, np.abs(pred - ds.labels[idx]))
        _sidecar(args.cdf, _provenance(args, checkpoint=cfg))
    d = rep.to_dict()
    fmt = lambda v: "undefined" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"{args.split}: n {d['n']} rmse {d['rmse_db']:.3f} dB mae {d['mae_db']:.3f} dB "
          f"r {fmt(d['pearson_r'])} R2 {fmt(d['r_squared'])} coverage@{args.threshold:g}dB {d['coverage']:.3f}")
    return 0


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    try:
        spec = models.preset(args.model)
    except models.SpecError as exc:
        raise UsageError(str(exc)) from None
    rep = analysis.cost_report(spec)
    if args.json:
        print(json.dumps({"model": args.model, **rep.to_dict()}, indent=1))
        return 0
    print(f"{args.model}: {rep.summary()}")
    print(f"exact: {rep.flops} FLOPs, {rep.params} parameters")
    print(f"convention: {rep.convention}")
    print("parameters:")
    for k, v in rep.params_breakdown.items():
        print(f"  {k:<24} {v:>12}")
    print("flops:")
    for k, v in rep.flops_breakdown.items():
        print(f"  {k:<24} {v:>14}")
    print(f"head (excluded from FLOPs): {rep.head_flops}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multiview-rssi", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the seed of gen/train")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (needs threadpoolctl)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="simulate a scene and write a dataset")
    g.add_argument("--scene", type=Path, help="scene JSON (defaults to the built-in room)")
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen)

    q = sub.add_parser("preprocess", help="condition a raw RSSI CSV")
    q.add_argument("--rssi", type=Path, required=True)
    q.add_argument("--rate-in", type=float, default=40.0)
    q.add_argument("--rate-out", type=float, default=20.0)
    q.add_argument("--mad-window", type=int, default=40)
    q.add_argument("--mad-threshold", type=float, default=5.0)
    q.add_argument("--smooth", type=float, default=4)
    q.add_argument("--out", type=Path, required=True)
    q.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="two-phase training on a generated dataset")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--model", required=True, choices=["sinvit-d", "sinvit-w", "mulvit-tf", "mulvit-twdnn"])
    t.add_argument("--config", type=Path, help="JSON with optional 'train' and 'model' sections")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", type=Path, help="continue from a state.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--threshold", type=float, default=3.0)
    e.add_argument("--report", type=Path, required=True)
    e.add_argument("--cdf", type=Path)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="FLOPs and parameter counts of a preset")
    a.add_argument("--model", required=True)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_analyze)
    return p


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be at least 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl is not installed; --threads ignored")
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        for msg in exc.problems:
            print(f"error: {msg}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
