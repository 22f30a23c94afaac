"""Command-line entry point: ``skillscore {synth,masks,features,train,eval,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("skillscore")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "cache_dir": None,
    "out": None,
    "seed": 0,
    "workers": 1,
    "prompt": "metallic tool",
    "backend": "stub",
    "box_threshold": 0.3,
    "iou_dedup": 0.5,
    "fallback": False,
    "preset": "nano",
    "variant": "bilstm",
    "epochs": 200,
    "warmup_epochs": None,  # derived: 10% of epochs
    "max_lr": 3e-5,
    "min_lr": 0.0,
    "weight_decay": 0.01,
    "batch_size": 2,
    "hidden": 256,
    "num_frames": 160,
    "image_size": 224,
    "freeze_extractor": False,
    "compute_missing": False,
    "no_augment": False,
    "spearman_weight": 0.0,
    "weights": None,
    "oracle_head": False,
    "method": None,
    "backend_options": {},
    # synth
    "n": 8,
    "frames": 16,
    "size": 64,
}


class UsageError(ValueError):
    pass


def _add_common(p: argparse.ArgumentParser, *names: str) -> None:
    opts = {
        "manifest": dict(type=Path, help="dataset manifest (JSON)"),
        "cache_dir": dict(type=Path, help="mask/feature cache (default: $ZEAL_CACHE_DIR or ./cache)"),
        "out": dict(type=Path, help="output directory"),
        "seed": dict(type=int),
        "workers": dict(type=int, help="parallel videos for mask generation"),
        "prompt": dict(help='text prompt for the detector (default "metallic tool")'),
        "backend": dict(choices=["stub", "external"]),
        "box_threshold": dict(type=float),
        "iou_dedup": dict(type=float),
        "fallback": dict(action="store_true", default=None,
                         help="emit an empty mask when the backend fails on a frame"),
        "preset": dict(choices=["micro", "nano"]),
        "variant": dict(choices=["bilstm", "temporal_pool_mlp"]),
        "fold": dict(type=int),
        "epochs": dict(type=int),
        "warmup_epochs": dict(type=int),
        "max_lr": dict(type=float),
        "batch_size": dict(type=int),
        "hidden": dict(type=int),
        "num_frames": dict(type=int),
        "image_size": dict(type=int),
        "weights": dict(type=Path, help="extractor weights (safetensors state dict)"),
        "freeze_extractor": dict(action="store_true", default=None,
                                 help="train the head on cached features only"),
        "compute_missing": dict(action="store_true", default=None,
                                help="build missing mask/feature cache entries"),
        "no_augment": dict(action="store_true", default=None),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, **opts[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillscore", description=__doc__)
    parser.add_argument("--config", type=Path, help="JSON config; flags override its values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset + manifest + folds")
    p.add_argument("--n", type=int, help="number of videos (multiple of 4)")
    p.add_argument("--frames", type=int, help="frames per video")
    p.add_argument("--size", type=int, help="frame size in pixels")
    _add_common(p, "seed", "out")

    mask_opts = ("prompt", "backend", "box_threshold", "iou_dedup", "fallback", "workers")
    p = sub.add_parser("masks", help="generate and cache tool masks")
    _add_common(p, "manifest", "cache_dir", *mask_opts)

    net_opts = ("preset", "seed", "weights", "num_frames", "image_size")
    p = sub.add_parser("features", help="extract and cache feature sequences")
    _add_common(p, "manifest", "cache_dir", *net_opts, *mask_opts, "compute_missing")

    train_opts = ("variant", "epochs", "warmup_epochs", "max_lr", "batch_size", "hidden",
                  "freeze_extractor", "compute_missing", "no_augment")
    p = sub.add_parser("train", help="train one fold")
    _add_common(p, "manifest", "cache_dir", "out", "fold", *net_opts, *mask_opts, *train_opts)

    p = sub.add_parser("eval", help="4-fold cross-validation with reports")
    _add_common(p, "manifest", "cache_dir", "out", *net_opts, *mask_opts, *train_opts)
    p.add_argument("--oracle-head", dest="oracle_head", action="store_true", default=None,
                   help="predict the ground truth (protocol check)")
    p.add_argument("--method", help="method label in the report tables")

    p = sub.add_parser("report", help="render tables and figures from report.json files")
    p.add_argument("inputs", nargs="+", type=Path, help="report.json files or directories holding one")
    _add_common(p, "out")
    return parser


def effective_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    env_cache = os.environ.get("ZEAL_CACHE_DIR")
    cfg["cache_dir"] = Path(env_cache) if env_cache else Path("cache")
    if args.config is not None:
        try:
            file_cfg = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        for k, v in file_cfg.items():
            key = k.replace("-", "_")
            if key not in DEFAULTS and key not in ("manifest", "fold"):
                raise UsageError(f"unknown config key {k!r}")
            cfg[key] = v
    for k, v in vars(args).items():
        if k in ("config", "verbose", "command", "inputs"):
            continue
        if v is not None:
            cfg[k] = v
    for k in ("manifest", "cache_dir", "out", "weights"):
        if cfg.get(k) is not None:
            cfg[k] = Path(cfg[k])
    if cfg.get("warmup_epochs") is None:
        cfg["warmup_epochs"] = int(cfg["epochs"]) // 10
    cfg["command"] = args.command
    return cfg


def _echo(cfg: dict, out: Path | None) -> None:
    text = json.dumps({k: str(v) if isinstance(v, Path) else v for k, v in sorted(cfg.items())},
                      indent=1, sort_keys=True)
    print(f"effective config:\n{text}", file=sys.stderr)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"effective_config_{cfg['command']}.json").write_text(text + "\n")


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _mask_config(cfg: dict):
    from .masks import MaskConfig

    return MaskConfig(cfg["prompt"], float(cfg["box_threshold"]), float(cfg["iou_dedup"]),
                      bool(cfg["fallback"]), dict(cfg["backend_options"]))


def _backend_factory(cfg: dict):
    from .masks import make_backend

    kind, options = cfg["backend"], dict(cfg["backend_options"])
    make_backend(kind, **options)  # fail early with an actionable message
    return lambda: make_backend(kind, **options)


def _train_config(cfg: dict):
    from .training import TrainConfig

    try:
        return TrainConfig(
            epochs=int(cfg["epochs"]), warmup_epochs=int(cfg["warmup_epochs"]),
            max_lr=float(cfg["max_lr"]), min_lr=float(cfg["min_lr"]),
            weight_decay=float(cfg["weight_decay"]), batch_size=int(cfg["batch_size"]),
            seed=int(cfg["seed"]), preset=cfg["preset"], variant=cfg["variant"],
            hidden=int(cfg["hidden"]), num_frames=int(cfg["num_frames"]),
            image_size=int(cfg["image_size"]), freeze_extractor=bool(cfg["freeze_extractor"]),
            augment=not cfg["no_augment"], spearman_weight=float(cfg["spearman_weight"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _build_net(cfg: dict):
    from .features import build_net

    if int(cfg["image_size"]) % 32:
        raise UsageError("--image-size must be a multiple of 32")
    net = build_net(cfg["preset"], seed=int(cfg["seed"]))
    if cfg.get("weights"):
        from safetensors.torch import load_file

        net.load_state_dict(load_file(str(cfg["weights"])))
    return net


def _load(cfg: dict):
    from .data import load_dataset, load_manifest_folds

    _require(cfg, "manifest")
    samples = load_dataset(cfg["manifest"])
    return samples, load_manifest_folds(cfg["manifest"], samples)


def _items(cfg: dict, samples, net, train_cfg):
    """Features (frozen extractor) or in-memory clips, building caches if allowed."""
    from . import pipeline as pl

    if cfg["compute_missing"]:
        pl.ensure_masks(samples, cfg["cache_dir"], _mask_config(cfg), _backend_factory(cfg),
                        int(cfg["workers"]))
    if train_cfg.freeze_extractor:
        return pl.ensure_features(samples, cfg["cache_dir"], net, cfg["preset"],
                                  train_cfg.num_frames, train_cfg.image_size,
                                  compute_missing=bool(cfg["compute_missing"]))
    return pl.load_clips(samples, cfg["cache_dir"], train_cfg.num_frames, train_cfg.image_size)


# -- subcommands ---------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    from .data import write_synthetic_dataset

    _require(cfg, "out")
    n, frames, size = int(cfg["n"]), int(cfg["frames"]), int(cfg["size"])
    if n < 4 or n % 4:
        raise UsageError(f"--n must be a positive multiple of 4, got {n}")
    if frames < 2:
        raise UsageError(f"--frames must be >= 2, got {frames}")
    if size < 16:
        raise UsageError(f"--size must be >= 16, got {size}")
    _echo(cfg, cfg["out"])
    manifest = write_synthetic_dataset(cfg["out"], int(cfg["seed"]), n, frames, size)
    print(manifest)
    return EXIT_OK


def cmd_masks(cfg: dict) -> int:
    from . import pipeline as pl

    samples, _ = _load(cfg)
    _echo(cfg, None)
    stats = pl.ensure_masks(samples, cfg["cache_dir"], _mask_config(cfg), _backend_factory(cfg),
                            int(cfg["workers"]))
    for vid, st in stats.items():
        state = "computed" if st["computed"] else "cached"
        print(f"{vid}\tmean_foreground_ratio={st['mean_foreground_ratio']:.4f}\t{state}")
    return EXIT_OK


def cmd_features(cfg: dict) -> int:
    from . import pipeline as pl

    samples, _ = _load(cfg)
    _echo(cfg, None)
    net = _build_net(cfg)
    if cfg["compute_missing"]:
        pl.ensure_masks(samples, cfg["cache_dir"], _mask_config(cfg), _backend_factory(cfg),
                        int(cfg["workers"]))
    feats = pl.ensure_features(samples, cfg["cache_dir"], net, cfg["preset"],
                               int(cfg["num_frames"]), int(cfg["image_size"]))
    for vid, seq in feats.items():
        print(f"{vid}\tT={seq.foreground.shape[0]}\td={seq.foreground.shape[1]}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    from .training import train_fold

    _require(cfg, "out", "fold")
    fold = int(cfg["fold"])
    if not 0 <= fold < 4:
        raise UsageError(f"--fold must be in 0..3, got {fold}")
    train_cfg = _train_config(cfg)
    samples, folds = _load(cfg)
    _echo(cfg, cfg["out"])
    net = _build_net(cfg)
    items = _items(cfg, samples, net, train_cfg)
    for task, spec in sorted(folds.items()):
        f = spec[fold]
        run_dir = cfg["out"] / task / f"fold{fold}"
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt, _ = train_fold([items[i] for i in f.train], [items[i] for i in f.val], train_cfg,
                             net=net, log_path=run_dir / "run_log.jsonl")
        ckpt.save(run_dir / "checkpoint.safetensors")
        print(f"{task} fold {fold}: best epoch {ckpt.epoch}, val_loss {ckpt.val_loss:.6f} "
              f"-> {run_dir / 'checkpoint.safetensors'}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .evaluation import run_cross_validation
    from .plotting import render_figures

    _require(cfg, "out")
    train_cfg = _train_config(cfg)
    samples, folds = _load(cfg)
    _echo(cfg, cfg["out"])
    if cfg["oracle_head"]:
        items, net = {}, None
    else:
        net = _build_net(cfg)
        items = _items(cfg, samples, net, train_cfg)
    report = run_cross_validation(items, samples, folds, train_cfg, net=net, out_dir=cfg["out"],
                                  oracle=bool(cfg["oracle_head"]), method=cfg["method"])
    doc = report.to_dict()
    render_figures([doc], [cfg["out"]], cfg["out"] / "figures")
    for task, entry in doc["per_task"].items():
        for row in entry["per_fold"]:
            print(f"{task} fold {row['fold']}: rho={_num(row['rho'])} "
                  f"R-l2x100={_num(row['r_l2_x100'], 3)} train_rho={_num(row['train_rho'])}")
    print(f"average: rho={_num(doc['average']['rho'])} R-l2x100={_num(doc['average']['r_l2_x100'], 3)}")
    return EXIT_OK


def _num(v, digits=4) -> str:
    return "undefined" if v is None else f"{v:.{digits}f}"


def cmd_report(cfg: dict, inputs: list[Path]) -> int:
    from .evaluation import load_report, write_tables
    from .plotting import render_figures

    _require(cfg, "out")
    paths = [p / "report.json" if p.is_dir() else p for p in inputs]
    docs = [load_report(p) for p in paths]
    _echo(cfg, cfg["out"])
    tables = write_tables(docs, cfg["out"])
    figures = render_figures(docs, [p.parent for p in paths], cfg["out"])
    for p in [*tables, *figures]:
        print(p)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        if args.command == "report":
            return cmd_report(cfg, args.inputs)
        handler = {"synth": cmd_synth, "masks": cmd_masks, "features": cmd_features,
                   "train": cmd_train, "eval": cmd_eval}[args.command]
        return handler(cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"skillscore: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        if args.verbose:
            log.exception("failed")
        print(f"skillscore: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
