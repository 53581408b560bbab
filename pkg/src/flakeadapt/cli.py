"""flakeadapt command line.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure,
3 an acceptance threshold was not met (pipeline --check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import colorimetry as cm
from . import config as config_mod
from . import experiment as ex
from . import plots
from .config import ConfigError
from .optics import ConfigurationError, OpticsError
from .synthgen import SceneRenderer, compose_scene, resolve_domain, scene_rng, spectra_table

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3

log = logging.getLogger("flakeadapt")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config field, e.g. adapt.lr=1e-3 (repeatable)")
    p.add_argument("--force", action="store_true", help="accept or overwrite artifacts whose config hash differs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flakeadapt", description="Synthetic 2D-flake data, task training and source-free adaptation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the source and target datasets")
    _add_common(p)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train the classifier and thickness head on source patches")
    _add_common(p)

    p = sub.add_parser("pretrain-adapt", help="supervised pretraining of ColorNorm and SpecInv on source data")
    _add_common(p)

    p = sub.add_parser("adapt", help="entropy adaptation on a target dataset")
    _add_common(p)
    p.add_argument("--target", help="target name (default: first target)")

    p = sub.add_parser("eval", help="evaluate the task model on a dataset")
    _add_common(p)
    p.add_argument("--dataset", default=ex.SOURCE, help="'source' or a target name")
    p.add_argument("--adapted", action="store_true", help="route images through the dataset's adapted network")

    p = sub.add_parser("render", help="render one scene to PNG and dump a pixel's reflectance spectrum")
    _add_common(p)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--domain", default=ex.SOURCE, help="'source' or a target name")
    p.add_argument("--x", type=int)
    p.add_argument("--y", type=int)
    p.add_argument("--out", type=Path, help="output stem (default <output_dir>/render/scene_<seed>)")

    p = sub.add_parser("pipeline", help="run every stage and write a consolidated report")
    _add_common(p)
    p.add_argument("--ablation", action="store_true", help="also run the seven-row toggle grid")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--check", action="store_true", help="exit 3 unless the target gap and recovery thresholds hold")
    p.add_argument("--min-gap", type=float, default=0.10)
    p.add_argument("--min-recovery", type=float, default=0.5)
    return parser


def load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config, args.overrides)
    ex.prepare(cfg)
    return cfg


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


def cmd_gen_data(args, cfg):
    summary = ex.gen_data(cfg, ex.Layout(cfg.output_dir), force=args.force, workers=args.workers)
    _print(summary)


def cmd_train(args, cfg):
    _, report = ex.train(cfg, ex.Layout(cfg.output_dir), force=args.force)
    cls = {k: v for k, v in report["classification"].items() if k != "loss_history"}
    _print({"classification": cls, "thickness": report["thickness"], "checkpoint_sha256": report["checkpoint_sha256"]})


def cmd_pretrain(args, cfg):
    _, report = ex.pretrain_adapter(cfg, ex.Layout(cfg.output_dir), force=args.force)
    _print({"colornorm_val_rel_error_median": report["colornorm"]["val_rel_error_median"], "specinv_val_mse": report["specinv"]["val_mse"], "checkpoint_sha256": report["checkpoint_sha256"]})


def _target_name(cfg, name):
    names = list(ex.target_configs(cfg))
    if name is None:
        if not names:
            raise ConfigError("config has no targets")
        return names[0]
    if name not in names:
        raise ConfigError(f"unknown target {name!r}; config has {names}")
    return name


def cmd_adapt(args, cfg):
    name = _target_name(cfg, args.target)
    _, report = ex.adapt_target(cfg, ex.Layout(cfg.output_dir), name, force=args.force)
    _print({"target": name, "final_mean_entropy": report["final_mean_entropy"], "updates": len(report["history"]), "checkpoint_sha256": report["checkpoint_sha256"]})


def cmd_eval(args, cfg):
    name = args.dataset if args.dataset == ex.SOURCE else _target_name(cfg, args.dataset)
    if args.adapted and name == ex.SOURCE:
        raise ConfigError("--adapted needs a target dataset")
    report = ex.evaluate_stage(cfg, ex.Layout(cfg.output_dir), name, args.adapted, force=args.force)
    _print({k: report[k] for k in ("dataset", "adapted", "accuracy", "per_class_accuracy", "confusion_matrix", "thickness_mae_nm", "predictions_file")})


def cmd_render(args, cfg):
    grid = ex.grid_of(cfg)
    renderer = SceneRenderer(grid)
    if args.domain == ex.SOURCE:
        dc = cfg.source
    else:
        dc = ex.target_configs(cfg)[_target_name(cfg, args.domain)]
    domain = resolve_domain(dc)
    scene = compose_scene(scene_rng(domain.seed, args.scene_seed), cfg.scene, renderer.per_layer_nm(cfg.scene.materials))
    rgb, _ = renderer.render(scene, domain)
    stem = args.out or Path(cfg.output_dir) / "render" / f"scene_{args.scene_seed}"
    stem.parent.mkdir(parents=True, exist_ok=True)
    png = stem.with_suffix(".png")
    cm.save_png(png, rgb)
    result = {"png": str(png), "flakes": len(scene.flakes), "domain": domain.to_json(), "config_hash": config_mod.config_hash(cfg)}
    if args.x is not None or args.y is not None:
        if args.x is None or args.y is None:
            raise ConfigError("--x and --y must be given together")
        if not (0 <= args.x < scene.width and 0 <= args.y < scene.height):
            raise ConfigError(f"pixel ({args.x}, {args.y}) outside the {scene.width}x{scene.height} image")
        k = int(scene.label_map[args.y, args.x])
        R = spectra_table(scene, renderer.cache)[k]
        spec_path = Path(str(stem) + f"_spectrum_{args.x}_{args.y}.csv")
        with open(spec_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["wavelength_nm", "reflectance"])
            for wl, r in zip(grid.wavelengths_nm, R):
                w.writerow([f"{wl:.6f}", repr(float(r))])
        fig = plots.spectrum(grid.wavelengths_nm, R, spec_path.with_suffix(".png"), title=_pixel_title(scene, k))
        result.update({"spectrum_csv": str(spec_path), "spectrum_png": str(fig), "label": k, "rgb": np.asarray(rgb[args.y, args.x]).tolist()})
    _print(result)


def _pixel_title(scene, k):
    if k == 0:
        return f"bare substrate ({scene.substrate_sio2_nm:g} nm SiO2)"
    f = scene.flakes[k - 1]
    return f"{f.material_id}, {f.layer_count} layer(s)"


def cmd_pipeline(args, cfg):
    report = ex.pipeline(cfg, force=args.force, ablation=args.ablation, workers=args.workers)
    brief = {
        "source_accuracy": report["source"]["accuracy"],
        "targets": {
            k: {"pre_adapt": v["pre_adapt"]["accuracy"], "post_adapt": v["post_adapt"]["accuracy"], "recovered_fraction": v["recovered_fraction"]}
            for k, v in report["targets"].items()
        },
        "report": str(ex.Layout(cfg.output_dir).report("pipeline")),
    }
    if args.ablation:
        brief["ablation"] = {r["label"]: r["mean_accuracy"] for r in report["ablation"]}
    _print(brief)
    if args.check:
        for name, t in report["targets"].items():
            if t["gap"] < args.min_gap or (t["recovered_fraction"] or 0.0) < args.min_recovery:
                log.error("target %s: gap %.3f, recovered %.3f below thresholds", name, t["gap"], t["recovered_fraction"] or 0.0)
                return EXIT_ACCEPTANCE
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "pretrain-adapt": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "render": cmd_render,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg) or EXIT_OK
    except (ConfigError, ConfigurationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ex.StageError, OpticsError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
