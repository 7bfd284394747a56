"""Command line entry point: ``trd make-toy | train | eval | infer``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .datasets import ToyConfig, read_aux, read_rgb, load_dataset, save_toy
from .exceptions import (CalibrationError, CheckpointError, ConfigError, DataError, EvaluationError,
                         IngestionError, MetricError, TrainingError, WeightLoadError)
from .model import forward, load_checkpoint, read_checkpoint
from .scoring import branch_map, fuse, image_score, smooth
from .trainer import evaluate, train
from .visualize import save_grid, save_heatmap

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["trainer.seed"] = args.seed
        out["data.seed"] = args.seed
    if getattr(args, "profile", None) is not None:
        out["backbone.profile"] = args.profile
    if getattr(args, "fusion", None) is not None:
        out["score.fusion"] = args.fusion
    if getattr(args, "epochs", None) is not None:
        out["trainer.epochs"] = args.epochs
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _resolve(args, base: dict | None = None) -> RunConfig:
    return load_config(args.config, _overrides(args), base)


def _echo(cfg: RunConfig) -> None:
    print("# resolved configuration")
    print(cfg.dump().rstrip())
    print(f"# fingerprint {cfg.fingerprint()}", flush=True)


def cmd_make_toy(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    toy = ToyConfig.from_run_config(cfg)
    counts = save_toy(toy, out, cfg.data.category)
    print(f"toy dataset written to {out / cfg.data.category} (seed={toy.seed}, "
          + ", ".join(f"{k}={v}" for k, v in counts.items()) + ")")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    try:
        train_data, val_data, _ = load_dataset(cfg)
    except IngestionError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    ckpt = out / "model.ckpt"
    result = train(cfg, train_data, val_data, checkpoint_path=ckpt, resume_from=args.resume,
                   progress=lambda line: print(line, flush=True))
    c = result.model.calibration
    print(f"calibration mu/sigma 2d={c.mu_2d:.4f}/{c.sigma_2d:.4f} 3d={c.mu_3d:.4f}/{c.sigma_3d:.4f}")
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest, _ = read_checkpoint(args.checkpoint)
    cfg = _resolve(args, manifest["config"])
    _echo(cfg)
    model, _ = load_checkpoint(args.checkpoint, cfg=cfg)
    try:
        _, _, test = load_dataset(cfg)
    except IngestionError as exc:
        raise ConfigError(str(exc)) from exc
    result = evaluate(model, test, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(result.report.to_table())
    (out / "report.json").write_text(result.report.to_json())
    print(result.report.to_table(), end="")
    if args.dump_maps:
        maps_dir = out / "maps"
        maps_dir.mkdir(exist_ok=True)
        for i, s in enumerate(test):
            stem = f"{i:04d}"
            save_grid(maps_dir / f"{stem}_fused.npy", result.fused[i])
            save_grid(maps_dir / f"{stem}_2d.npy", result.maps_2d[i])
            save_grid(maps_dir / f"{stem}_3d.npy", result.maps_3d[i])
            save_heatmap(maps_dir / f"{stem}_fused.png", result.fused[i], s.mask)
    print(f"report written to {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    manifest, _ = read_checkpoint(args.checkpoint)
    cfg = _resolve(args, manifest["config"])
    model, _ = load_checkpoint(args.checkpoint, cfg=cfg)
    if cfg.score.fusion == "norm_sum" and model.calibration is None:
        raise EvaluationError("checkpoint has no calibration stats")
    size = cfg.resolution
    try:
        rgb = read_rgb(Path(args.rgb), size)
        depth = read_aux(Path(args.depth), size)
    except IngestionError as exc:
        raise UsageError(str(exc)) from exc
    model.eval()
    out = forward(model, (rgb, depth))
    m2d = smooth(branch_map(out.branch_2d.F_E_own, out.branch_2d.F_CA, (size, size)), cfg.pixel_sigma)[0]
    m3d = smooth(branch_map(out.branch_3d.F_E_own, out.branch_3d.F_CA, (size, size)), cfg.pixel_sigma)[0]
    fused = fuse(m2d, m3d, model.calibration, cfg.score.fusion)
    score = image_score(fused)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    save_heatmap(dest / "fused.png", fused)
    save_heatmap(dest / "2d.png", m2d)
    save_heatmap(dest / "3d.png", m3d)
    (dest / "score.txt").write_text(f"{score:.10g}\n")
    print(f"score {score:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file")
    common.add_argument("--seed", type=int, help="overrides trainer.seed and data.seed")
    common.add_argument("--profile", choices=("toy", "full"))
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any dotted config key")

    parser = argparse.ArgumentParser(prog="trd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", parents=[common], help="write the synthetic toy dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train", parents=[common], help="train and calibrate a model")
    p.add_argument("--out", required=True, help="output directory for model.ckpt and its train log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fusion", choices=("norm_sum", "sum_raw", "product"))
    p.add_argument("--dump-maps", action="store_true", help="write per-sample float grids and heatmaps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="score one RGB + depth pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fusion", choices=("norm_sum", "sum_raw", "product"))
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, EvaluationError, CheckpointError, CalibrationError, MetricError,
            IngestionError, WeightLoadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
