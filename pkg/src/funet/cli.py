"""Command-line surface: synth, train, eval, infer, gradcheck, bench.

Exit codes: 0 ok, 2 usage/config error, 3 I/O failure, 4 numeric failure,
5 checkpoint mismatch, 6 gradient-check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from . import tensor as ops
from .checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint
from .data import (
    ClipDataset,
    DatasetManifest,
    SyntheticVideoSpec,
    clip_windows,
    load_frame,
    load_manifest,
    resize_bilinear_array,
    synth_generate,
)
from .gradcheck import run_suite
from .model import FUnet, FUnetConfig, normalize_variant
from .tensor import NumericError, Tensor
from .training import TrainConfig, TrainingDiverged, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5
EXIT_GRADCHECK = 6

GRADCHECK_TOLERANCE = 1e-4

_MODEL_KEYS = {f.name for f in fields(FUnetConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class ConfigError(ValueError):
    pass


def load_run_config(path=None, overrides=None) -> tuple[FUnetConfig, TrainConfig, str]:
    """Flat JSON config (model + training keys + 'variant') with overrides.

    Unknown keys are an error so typos cannot silently fall back to
    defaults."""
    doc = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    doc.update(overrides or {})
    unknown = set(doc) - _MODEL_KEYS - _TRAIN_KEYS - {"variant"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model_cfg = FUnetConfig.from_dict({k: v for k, v in doc.items() if k in _MODEL_KEYS})
    train_cfg = TrainConfig.from_dict({k: v for k, v in doc.items() if k in _TRAIN_KEYS})
    variant = normalize_variant(doc.get("variant", "BIC"))
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg, variant


def run_config_dict(model_cfg: FUnetConfig, train_cfg: TrainConfig, variant: str) -> dict:
    return {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "variant": variant}


def build_model_from_config(doc: dict, seed=None) -> FUnet:
    model_cfg = FUnetConfig.from_dict(doc["model"])
    if seed is None:
        seed = doc.get("train", {}).get("seed", 0)
    return FUnet(model_cfg, variant=doc.get("variant", "BIC"), seed=seed)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"size must look like 256x448, got {text!r}") from exc
    if h < 1 or w < 1:
        raise ConfigError(f"size must be positive, got {text!r}")
    return h, w


def _load_manifest_for(data_dir, seed: int) -> DatasetManifest:
    manifest_path = Path(data_dir) / "manifest.json"
    if manifest_path.is_file():
        return DatasetManifest.load(manifest_path)
    return load_manifest(data_dir, seed=seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SyntheticVideoSpec(
        n_sequences=args.sequences,
        frames_per_sequence=args.frames_per_seq,
        height=args.size[0],
        width=args.size[1],
        ellipse_count=args.ellipses,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    spec.validate()
    synth_generate(spec, args.out)
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.variant is not None:
        overrides["variant"] = args.variant
    model_cfg, train_cfg, variant = load_run_config(args.config, overrides)
    manifest = _load_manifest_for(args.data, train_cfg.seed)
    model = FUnet(model_cfg, variant=variant, seed=train_cfg.seed)
    trace_path = Path(args.out).with_suffix(Path(args.out).suffix + ".trace.csv")
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_max_dice"])

        def on_epoch(rec):
            writer.writerow([rec.epoch, f"{rec.train_loss:.6f}", f"{rec.val_max_dice:.6f}"])
            fh.flush()
            print(f"epoch {rec.epoch}: train_loss {rec.train_loss:.4f} val_maxDice {rec.val_max_dice:.4f}")

        result = train(model, manifest, train_cfg, on_epoch=on_epoch)
    save_checkpoint(args.out, model.state_dict(), run_config_dict(model_cfg, train_cfg, variant))
    print(f"best epoch {result.best_epoch} val_maxDice {result.best_val_max_dice:.4f}")
    print(f"checkpoint: {args.out}")
    print(f"trace: {trace_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, doc = load_model(args.ckpt, build_model_from_config)
    manifest = _load_manifest_for(args.data, doc.get("train", {}).get("seed", 0))
    cfg = model.config
    dataset = ClipDataset(manifest, args.split, cfg.t_frames, (cfg.input_h, cfg.input_w))
    if len(dataset) == 0:
        raise ConfigError(f"split {args.split!r} contains no clips")
    report = evaluate(model, dataset)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(report.to_json(indent=1))
    print(
        f"{args.split}: frames {report.frames} maxDice {report.max_dice:.4f} "
        f"maxIOU {report.max_iou:.4f} MAE {report.mae:.4f} "
        f"meanSpe {report.mean_spe:.4f} maxSpe {report.max_spe:.4f}"
    )
    print(f"report: {args.report}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, doc = load_model(args.ckpt, build_model_from_config)
    cfg = model.config
    frame_paths = sorted(Path(args.frames).glob("*.png"))
    if len(frame_paths) < cfg.t_frames:
        raise ConfigError(f"need at least T={cfg.t_frames} frames, found {len(frame_paths)}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    raw = [load_frame(p) for p in frame_paths]
    sizes = [f.shape[1:] for f in raw]
    resized = np.stack([
        np.clip(resize_bilinear_array(f, cfg.input_h, cfg.input_w), 0.0, 1.0) if f.shape[1:] != (cfg.input_h, cfg.input_w) else f
        for f in raw
    ])
    probs = np.zeros((len(raw), cfg.input_h, cfg.input_w), dtype=np.float32)
    for start in clip_windows(len(raw), cfg.t_frames, cfg.t_frames):
        clip = Tensor(resized[start : start + cfg.t_frames][None])
        logits = model(clip)
        probs[start : start + cfg.t_frames] = ops.sigmoid(logits).data[0, :, 0]

    for i, path in enumerate(frame_paths):
        p = probs[i]
        h, w = sizes[i]
        if p.shape != (h, w):
            p = np.clip(resize_bilinear_array(p[None].astype(np.float64), h, w)[0], 0.0, 1.0)
        encoded = np.round(p * 65535.0).astype(np.uint16)
        Image.fromarray(encoded).save(out_dir / path.name)
        if args.threshold is not None:
            hard = (p >= args.threshold).astype(np.uint8) * 255
            Image.fromarray(hard).save(out_dir / f"{path.stem}_mask.png")
    print(f"wrote {len(frame_paths)} probability maps to {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    results = run_suite(seeds, eps=args.eps, with_model=True)
    width = max(len(k) for k in results)
    failed = False
    for name in sorted(results):
        err = results[name]
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        failed = failed or err >= GRADCHECK_TOLERANCE
        print(f"{name:<{width}}  {err:.3e}  {status}")
    print(f"worst {max(results.values()):.3e} over {args.seeds} seeds (tolerance {GRADCHECK_TOLERANCE:.0e})")
    return EXIT_GRADCHECK if failed else EXIT_OK


def _bench_once(model: FUnet, clip: Tensor, iters: int) -> tuple[dict, np.ndarray]:
    model(clip)  # warmup (also triggers any JIT compilation)
    times = []
    out = None
    for _ in range(iters):
        t0 = time.perf_counter()
        out = model(clip)
        times.append(time.perf_counter() - t0)
    t = model.config.t_frames
    return (
        {
            "mean_s_per_clip": statistics.fmean(times),
            "median_s_per_clip": statistics.median(times),
            "fps": t / statistics.fmean(times),
        },
        out.data,
    )


def cmd_bench(args) -> int:
    doc, params = load_checkpoint(args.ckpt)
    model_cfg = FUnetConfig.from_dict(doc["model"])
    h, w = args.size if args.size else (model_cfg.input_h, model_cfg.input_w)
    t = args.frames if args.frames else model_cfg.t_frames
    target_cfg = FUnetConfig.from_dict({**model_cfg.to_dict(), "input_h": h, "input_w": w, "t_frames": t})
    target_cfg.validate()
    model = FUnet(target_cfg, variant=doc.get("variant", "BIC"), seed=0)
    if target_cfg == model_cfg:
        model.load_state_dict(params)
    else:
        print("note: bench size differs from checkpoint; timing freshly initialized parameters")
    rng = np.random.default_rng(args.seed)
    clip = Tensor(rng.random((1, t, target_cfg.in_channels, h, w)).astype(np.float32))

    backends = ["numba", "numpy"] if (args.compare_backends and kernels.HAS_NUMBA) else [kernels.backend_name()]
    outputs = {}
    for backend in backends:
        prev = kernels.set_backend(backend)
        try:
            stats, out = _bench_once(model, clip, args.iters)
        finally:
            kernels.set_backend(prev)
        outputs[backend] = out
        print(
            f"[{backend}] {t}x{h}x{w}: mean {stats['mean_s_per_clip'] * 1e3:.1f} ms/clip, "
            f"median {stats['median_s_per_clip'] * 1e3:.1f} ms/clip, {stats['fps']:.2f} fps"
        )
    if len(outputs) == 2:
        identical = np.array_equal(outputs["numba"], outputs["numpy"])
        print(f"backend outputs identical: {identical}")
        if not identical:
            raise NumericError("numba and numpy backends disagree")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funet", description="Video segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic video dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=40)
    p.add_argument("--frames-per-seq", type=int, default=10)
    p.add_argument("--size", type=_parse_size, default=(64, 112), metavar="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.12)
    p.add_argument("--ellipses", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write the best checkpoint")
    p.add_argument("--config", default=None, help="JSON run config (flat model+train keys)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--variant", choices=["B", "BI", "BIC"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "val+test"], default="val+test")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write per-frame probability maps (16-bit PNG)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time forward inference; no pass/fail target")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--size", type=_parse_size, default=None, metavar="HxW")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compare-backends", action="store_true", help="time numba and numpy kernel paths")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            print(f"checkpoint error: {exc}", file=sys.stderr)
            return EXIT_CHECKPOINT
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
