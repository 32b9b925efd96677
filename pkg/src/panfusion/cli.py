"""Command-line entry points: synth, train, sample, eval."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datasim, metrics, report, trainer
from .denoiser import load_checkpoint
from .tensorio import ImageTensor, load_manifest, read_tensor, write_tensor

log = logging.getLogger(__name__)

ENV_OUT = "PANFUSION_OUT"

SAMPLER_KEYS = ("steps", "eta", "kind", "seed")
SAMPLER_DEFAULTS = {"steps": 25, "eta": 0.0, "kind": "ddim", "seed": 0}


class UsageError(ValueError):
    """Bad flags or config; maps to exit code 2."""


def _section_fields() -> dict[str, tuple[str, ...]]:
    return {
        "synth": tuple(f.name for f in dataclasses.fields(datasim.SynthConfig)),
        "train": tuple(f.name for f in dataclasses.fields(trainer.TrainConfig)),
        "sampler": SAMPLER_KEYS,
        "metrics": tuple(f.name for f in dataclasses.fields(metrics.MetricConfig)),
    }


def load_run_config(path: str | Path | None) -> dict:
    """Read the optional JSON run config; reject unknown sections or keys."""
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config root must be a JSON object")
    known = _section_fields()
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise UsageError(f"unknown config sections: {unknown}")
    for name, section in raw.items():
        if not isinstance(section, dict):
            raise UsageError(f"config section {name!r} must be an object")
        bad = sorted(set(section) - set(known[name]))
        if bad:
            raise UsageError(f"unknown keys in config section {name!r}: {bad}")
    return raw


def _apply_overrides(cfg, overrides: dict):
    updates = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _validated(cfg):
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _out_dir(args, command: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    root = os.environ.get(ENV_OUT)
    if root:
        return Path(root) / command
    raise UsageError(f"no output directory: pass --out or set {ENV_OUT}")


def _write_resolved(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(resolved, indent=2, default=str)
    (out_dir / "resolved_config.json").write_text(text + "\n")
    log.info("resolved config: %s", json.dumps(resolved, default=str))


def _sampler_settings(args, run_config: dict) -> dict:
    settings = dict(SAMPLER_DEFAULTS)
    settings.update(run_config.get("sampler", {}))
    for key in SAMPLER_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if settings["steps"] < 1:
        raise UsageError(f"--steps must be >= 1, got {settings['steps']}")
    return settings


def _metric_config(args, run_config: dict, scale_ratio: int) -> metrics.MetricConfig:
    cfg = metrics.MetricConfig(scale_ratio=scale_ratio)
    cfg = _apply_overrides(cfg, run_config.get("metrics", {}))
    if getattr(args, "window", None) is not None:
        cfg = dataclasses.replace(cfg, uiqi_window=args.window)
    return cfg


def cmd_synth(args) -> int:
    run_config = load_run_config(args.config)
    cfg = _apply_overrides(datasim.SynthConfig(), run_config.get("synth", {}))
    if args.count is not None:
        if args.count < 1:
            raise UsageError(f"--count must be >= 1, got {args.count}")
        cfg = dataclasses.replace(cfg, train_count=args.count,
                                  val_count=args.count, test_count=args.count)
    cfg = _apply_overrides(cfg, {
        "seed": args.seed,
        "bands": args.bands,
        "patch_size": args.patch_size,
        "train_count": args.train_count,
        "val_count": args.val_count,
        "test_count": args.test_count,
    })
    cfg = dataclasses.replace(cfg, out_root=_out_dir(args, "synth"))
    _validated(cfg)
    if cfg.train_count + cfg.val_count + cfg.test_count == 0:
        raise UsageError("nothing to generate: all split counts are zero")
    resolved = {"synth": dataclasses.asdict(cfg)}
    _write_resolved(Path(cfg.out_root), resolved)
    manifests = datasim.synth_dataset(cfg)
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def _train_config(args, run_config: dict) -> trainer.TrainConfig:
    cfg = _apply_overrides(trainer.TrainConfig(), run_config.get("train", {}))
    if isinstance(cfg.channel_multipliers, list):
        cfg = dataclasses.replace(
            cfg, channel_multipliers=tuple(cfg.channel_multipliers))
    cfg = _apply_overrides(cfg, {
        "objective": args.objective,
        "loss": args.loss,
        "iterations": args.iterations,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "base_channels": args.base_channels,
        "seed": args.seed,
        "checkpoint_every": args.checkpoint_every,
        "wavelet_merge": args.wavelet_merge,
    })
    if args.no_residual:
        cfg = dataclasses.replace(cfg, residual=False)
    if args.no_style_mod:
        cfg = dataclasses.replace(cfg, use_style_mod=False)
    if args.no_wavelet_mod:
        cfg = dataclasses.replace(cfg, use_wavelet_mod=False)
    _validated(cfg)
    # Surface incompatible module knockouts as a usage error instead of a
    # runtime failure once the model is built.
    _validated(cfg.denoiser_config(in_bands=1))
    return cfg


def _check_resume(cfg: trainer.TrainConfig, resume: Path,
                  args) -> trainer.TrainConfig:
    ck = load_checkpoint(resume)
    stored = trainer.TrainConfig.from_dict(ck.config["train"])
    frozen = ("objective", "residual", "base_channels", "channel_multipliers",
              "use_style_mod", "use_wavelet_mod", "wavelet_merge", "timesteps",
              "schedule_offset", "seed")
    for name in frozen:
        if getattr(cfg, name) != getattr(stored, name):
            raise UsageError(
                f"{name} conflicts with the resume checkpoint: "
                f"{getattr(cfg, name)!r} vs {getattr(stored, name)!r}")
    return dataclasses.replace(stored, iterations=cfg.iterations,
                               checkpoint_every=cfg.checkpoint_every)


def cmd_train(args) -> int:
    run_config = load_run_config(args.config)
    cfg = _train_config(args, run_config)
    out_dir = _out_dir(args, "train")
    resume = Path(args.resume) if args.resume else None
    if resume is not None:
        cfg = _check_resume(cfg, resume, args)
    _write_resolved(out_dir, {"train": cfg.to_dict()})
    result = trainer.train(args.data, cfg, out_dir, resume=resume)
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"steps: {result.steps_run}  final loss: {result.losses[-1]:.6f}")
    return 0


def cmd_sample(args) -> int:
    run_config = load_run_config(args.config)
    settings = _sampler_settings(args, run_config)
    out_dir = _out_dir(args, "sample")
    model, ck = trainer.load_denoiser(args.checkpoint, use_ema=not args.no_ema)
    manifest = load_manifest(args.data)
    in_bands = ck.config["in_bands"]
    for entry in manifest.entries:
        bands = read_tensor(entry.lrms).data.shape[0]
        if bands != in_bands:
            raise UsageError(
                f"checkpoint expects {in_bands} bands, dataset has {bands}")
        break
    _write_resolved(out_dir, {"sampler": settings,
                              "checkpoint": str(args.checkpoint),
                              "data": str(args.data)})
    for idx, entry in enumerate(manifest.entries):
        sample = datasim.load_sample(entry)
        fused = trainer.fuse_image(
            model, ck, sample, steps=settings["steps"], eta=settings["eta"],
            kind=settings["kind"], seed=[settings["seed"], idx])
        stem = f"{idx:04d}"
        write_tensor(out_dir / f"{stem}_fused.ten",
                     ImageTensor(fused, sample.range_hint))
        report.save_preview_png(out_dir / f"{stem}_fused.png", fused)
        if sample.gt is not None:
            report.save_preview_png(out_dir / f"{stem}_gt.png", sample.gt)
            report.save_error_map_png(out_dir / f"{stem}_error.png",
                                      fused, sample.gt)
        log.info("fused %s", stem)
    print(f"wrote {len(manifest.entries)} fused images to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    run_config = load_run_config(args.config)
    manifest = load_manifest(args.data)
    fused_dir = Path(args.fused)
    out_dir = Path(args.out) if args.out is not None else fused_dir
    mcfg = _metric_config(args, run_config, manifest.scale_ratio)
    fused_rows, baseline_rows = [], []
    reference = None
    for idx, entry in enumerate(manifest.entries):
        sample = datasim.load_sample(entry)
        fused = read_tensor(fused_dir / f"{idx:04d}_fused.ten").data
        name = f"{idx:04d}"
        if sample.gt is not None:
            reference = True
            fused_rows.append(
                {"name": name, **metrics.evaluate_reference(fused, sample.gt, mcfg)})
            baseline_rows.append(
                {"name": name,
                 **metrics.evaluate_reference(sample.lrms_up, sample.gt, mcfg)})
        else:
            reference = False
            pan_degraded = datasim.mtf_downsample(
                sample.pan, manifest.scale_ratio, datasim.PAN_NYQUIST_GAIN)
            fused_rows.append(
                {"name": name,
                 **metrics.evaluate_non_reference(fused, sample.pan, sample.ms,
                                                  pan_degraded, mcfg)})
            baseline_rows.append(
                {"name": name,
                 **metrics.evaluate_non_reference(sample.lrms_up, sample.pan,
                                                  sample.ms, pan_degraded, mcfg)})
    resolved = {"metrics": dataclasses.asdict(mcfg),
                "fused": str(fused_dir), "data": str(args.data)}
    _write_resolved(out_dir, resolved)
    doc = report.report_doc({"fused": fused_rows, "baseline": baseline_rows},
                            resolved)
    paths = report.write_report(doc, out_dir)
    figure_metrics = ("ergas", "sam") if reference else ("qnr", "d_lambda")
    report.overview_figure(doc, out_dir / "overview.png", metrics=figure_metrics)
    print(paths["txt"].read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panfusion",
        description="Diffusion-based pansharpening: synth, train, sample, eval.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", help="dataset root directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, help="set all three split counts")
    p.add_argument("--train-count", type=int)
    p.add_argument("--val-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--patch-size", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a denoiser")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", required=True, help="training manifest.json")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--objective", choices=("epsilon", "x0", "v"))
    p.add_argument("--loss", choices=("l1", "l2"))
    p.add_argument("--no-residual", action="store_true",
                   help="predict the full image instead of the residual")
    p.add_argument("--no-style-mod", action="store_true")
    p.add_argument("--no-wavelet-mod", action="store_true")
    p.add_argument("--wavelet-merge", choices=("concat", "add"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="fuse images with a trained checkpoint")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="manifest.json to fuse")
    p.add_argument("--out", help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--kind", choices=("ddim", "ddpm"))
    p.add_argument("--seed", type=int)
    p.add_argument("--no-ema", action="store_true",
                   help="sample with raw weights instead of the EMA")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score fused images against a manifest")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--fused", required=True, help="directory of *_fused.ten")
    p.add_argument("--data", required=True, help="manifest.json")
    p.add_argument("--out", help="report directory (default: the fused dir)")
    p.add_argument("--window", type=int, help="sliding window for UIQI terms")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
