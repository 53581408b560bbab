"""Stage runners behind the CLI: data generation, training, adaptation,
evaluation and the ablation grid, all writing under ``cfg.output_dir``.

Every artifact records the config hash and ``git describe``. A stage that
finds an input produced under a different config hash refuses to use it
unless ``force`` is set.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adapt as ad
from . import assets, plots, tasks
from .config import AdaptConfig, ConfigError, ExperimentConfig, canonical_json, config_hash, git_describe, to_dict
from .neural import checkpoint
from .optics import SpectralGrid
from .synthgen import Dataset, SceneRenderer, emit_dataset, resolve_domain

log = logging.getLogger(__name__)

SOURCE = "source"

# (label, colornorm, source transform, entropy, neighbour penalty); None = no adaptation
ABLATION_ROWS = [
    ("no adaptation", None),
    ("entropy", (False, False, True, False)),
    ("source transform + entropy", (False, True, True, False)),
    ("source transform + entropy + neighbour", (False, True, True, True)),
    ("colornorm + entropy", (True, False, True, False)),
    ("colornorm + source transform + entropy", (True, True, True, False)),
    ("colornorm + source transform + entropy + neighbour", (True, True, True, True)),
]


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class HashMismatch(ConfigError):
    pass


# ---------------------------------------------------------------- layout and provenance


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def data(self, name: str) -> Path:
        return self.root / "data" / name

    @property
    def task_model(self) -> Path:
        return self.root / "models" / "task.ckpt"

    @property
    def pretrained_adapter(self) -> Path:
        return self.root / "models" / "adapter_pretrained.ckpt"

    def adapter(self, name: str) -> Path:
        return self.root / "models" / f"adapter_{name}.ckpt"

    def report(self, name: str) -> Path:
        return self.root / "reports" / f"{name}.json"

    def figure(self, name: str) -> Path:
        return self.root / "figures" / f"{name}.png"


def provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": config_hash(cfg), "git_describe": git_describe()}


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(json.loads(canonical_json(obj)), indent=1, sort_keys=True), encoding="utf-8")
    return path


def read_json(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def check_hash(found: str | None, cfg: ExperimentConfig, what: str, force: bool):
    expected = config_hash(cfg)
    if found == expected:
        return
    if force:
        log.warning("%s was produced with config hash %s (current %s); continuing because of --force", what, found, expected)
        return
    raise HashMismatch(f"{what} was produced with config hash {found}, current config hash is {expected}; use --force to accept it")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint_with_meta(path: Path, save_fn, obj, meta: dict) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = save_fn(path, obj)
    write_json(_sidecar(path), {**meta, "sha256": digest})
    return digest


def load_meta(path: Path, cfg, what, force) -> dict:
    if not path.exists():
        raise StageError(what, f"missing artifact {path}; run the producing stage first")
    meta = read_json(_sidecar(path))
    check_hash(meta.get("config_hash"), cfg, f"{what} ({path})", force)
    return meta


# ---------------------------------------------------------------- config helpers


def grid_of(cfg: ExperimentConfig) -> SpectralGrid:
    return SpectralGrid.uniform(cfg.grid.start, cfg.grid.stop, cfg.grid.count)


def target_configs(cfg: ExperimentConfig) -> dict:
    return {(t.name or f"target{i}"): t for i, t in enumerate(cfg.targets)}


def prepare(cfg: ExperimentConfig):
    """Point asset lookups at the configured root and check every referenced file exists."""
    if cfg.assets_root is not None:
        assets.set_root(cfg.assets_root)
    missing = []
    if not assets.cmf_path().exists():
        missing.append(str(assets.cmf_path()))
    for d in [cfg.source, *cfg.targets]:
        p = assets.illuminant_path(d.illuminant_id)
        if not p.exists():
            missing.append(str(p))
    for m in cfg.scene.materials:
        p = assets.materials_dir() / f"{m}.csv"
        if not p.exists():
            missing.append(str(p))
    for m in ("si", "sio2"):
        p = assets.materials_dir() / f"{m}.csv"
        if not p.exists():
            missing.append(str(p))
    if missing:
        raise ConfigError("missing asset file(s): " + ", ".join(missing))


# ---------------------------------------------------------------- stages


def gen_data(cfg: ExperimentConfig, out: Layout, force: bool = False, reuse: bool = False, workers: int = 1) -> dict:
    """Emit the source dataset and one dataset per target domain."""
    prov = provenance(cfg)
    domains = {SOURCE: (cfg.source, cfg.counts.source)}
    domains.update({name: (t, cfg.counts.target) for name, t in target_configs(cfg).items()})
    manifests = {}
    for name, (dc, count) in domains.items():
        root = out.data(name)
        existing = root / "manifest.json"
        if existing.exists():
            found = read_json(existing).get("config_hash")
            if reuse and found == prov["config_hash"]:
                manifests[name] = read_json(existing)
                continue
            if found != prov["config_hash"] and not force:
                raise HashMismatch(f"dataset {root} exists with config hash {found}; current is {prov['config_hash']}; use --force to overwrite")
        manifests[name] = emit_dataset(
            count,
            cfg.scene,
            resolve_domain(dc),
            root,
            grid=grid_of(cfg),
            config_hash=prov["config_hash"],
            git_describe=prov["git_describe"],
            workers=workers,
        )
    summary = {
        **prov,
        "datasets": {
            k: {"path": str(Path("data") / k), "count": m["count"], "instances": m["instance_count"], "domain": m["domain"], "annotations_sha256": m["annotations_sha256"]}
            for k, m in manifests.items()
        },
    }
    write_json(out.report("gen_data"), summary)
    return summary


def load_dataset(cfg, out: Layout, name: str, force: bool) -> Dataset:
    root = out.data(name)
    if not (root / "manifest.json").exists():
        raise StageError("data", f"dataset {root} not found; run gen-data first")
    ds = Dataset.load(root)
    check_hash(ds.manifest.get("config_hash"), cfg, f"dataset {root}", force)
    return ds


def load_patches(cfg, out: Layout, name: str, force: bool):
    ds = load_dataset(cfg, out, name, force)
    return ds, tasks.extract_patches(ds, cfg.train.patch_size)


def _labels(cfg, patches, per_layer_nm):
    if cfg.train.label_mode == "class":
        return patches.layer_class
    edges = tasks.layer_bin_edges(per_layer_nm, max(cfg.scene.layer_counts))
    return np.array([tasks.quantize_thickness(t, edges) for t in patches.thickness_nm])


def _per_layer(cfg) -> float:
    r = SceneRenderer(grid_of(cfg))
    return float(r.per_layer_nm(cfg.scene.materials[:1])[cfg.scene.materials[0]])


def _train_cfg(cfg):
    tc = cfg.train
    if tc.label_mode == "bins":
        tc = replace(tc, num_classes=max(cfg.scene.layer_counts))
    return tc


def train(cfg: ExperimentConfig, out: Layout, force: bool = False, seed: int | None = None, write: bool = True):
    """Train the classifier on source patches, then the thickness head on frozen features."""
    seed = cfg.seed if seed is None else seed
    ds, patches = load_patches(cfg, out, SOURCE, force)
    tc = _train_cfg(cfg)
    labels = _labels(cfg, patches, _per_layer(cfg))
    model, cls_metrics = tasks.train_source(patches, tc, seed=seed, labels=labels)
    backbone = checkpoint.digest(model.backbone.state_dict())
    model, thk_metrics = tasks.train_thickness(model, patches, tc, seed=seed)
    report = {
        **provenance(cfg),
        "dataset_hash": tasks.dataset_hash(ds),
        "seed": seed,
        "label_mode": tc.label_mode,
        "num_classes": tc.num_classes,
        "classification": cls_metrics,
        "thickness": thk_metrics,
        "backbone_digest": backbone,
        "backbone_unchanged_by_thickness_head": backbone == checkpoint.digest(model.backbone.state_dict()),
        "n_patches": len(patches),
    }
    if write:
        report["checkpoint_sha256"] = save_checkpoint_with_meta(out.task_model, tasks.save_model, model, {**provenance(cfg), "dataset_hash": report["dataset_hash"]})
        write_json(out.report("train"), report)
    return model, report


def load_task_model(cfg, out: Layout, force: bool):
    load_meta(out.task_model, cfg, "task model", force)
    return tasks.load_model(out.task_model)


def pretrain_adapter(cfg: ExperimentConfig, out: Layout, task_model=None, force: bool = False, seed: int | None = None, write: bool = True):
    """Supervised ColorNorm and SpecInv pretraining on source data only."""
    seed = cfg.seed if seed is None else seed
    task_model = task_model if task_model is not None else load_task_model(cfg, out, force)
    ds = load_dataset(cfg, out, SOURCE, force)
    renderer = SceneRenderer(grid_of(cfg))
    pc = cfg.pretrain
    crops = ad.spectral_crops(ds, renderer, pc.crop_size, pc.crops_per_image, seed)
    state = ad.AdaptationState.create(task_model, renderer.sensor(cfg.source.illuminant_id), cfg.adapt, seed=seed)
    t0 = time.perf_counter()
    cn = ad.pretrain_colornorm(state.colornorm, crops.x, pc, seed=seed)
    si = ad.pretrain_specinv(state.specinv, crops, pc, seed=seed)
    report = {
        **provenance(cfg),
        "seed": seed,
        "n_crops": len(crops),
        "colornorm": cn,
        "specinv": si,
        "d_out": state.specinv.d_out,
        "wall_time_s": time.perf_counter() - t0,
    }
    if write:
        report["checkpoint_sha256"] = save_checkpoint_with_meta(out.pretrained_adapter, ad.save_state, state, provenance(cfg))
        write_json(out.report("pretrain"), report)
    return state, report


def load_pretrained_adapter(cfg, out: Layout, task_model, force: bool):
    load_meta(out.pretrained_adapter, cfg, "pretrained adapter", force)
    sensor = SceneRenderer(grid_of(cfg)).sensor(cfg.source.illuminant_id)
    return ad.load_state(out.pretrained_adapter, task_model, sensor, cfg.adapt)


def _with_toggles(base: AdaptConfig, toggles) -> AdaptConfig:
    cn, st, ent, tau = toggles
    return replace(base, use_colornorm=cn, use_source_transform=st, use_entropy=ent, use_tau=tau)


def _uses_network(acfg: AdaptConfig) -> bool:
    return acfg.use_colornorm or acfg.use_source_transform


def evaluate_patches(task_model, patches, labels, state: ad.AdaptationState | None = None) -> dict:
    if state is None:
        return tasks.evaluate(task_model, patches, labels=labels)
    transform = state.transform if _uses_network(state.cfg) else None
    return tasks.evaluate(task_model, patches, transform=transform, labels=labels, feature_affine=state.feature_affine)


def run_adaptation(cfg, pretrained: ad.AdaptationState, patches, acfg: AdaptConfig, seed: int):
    state = pretrained.copy(acfg)
    report = ad.adapt(state, patches.x, patches.image_id, seed=seed)
    return state, report


def adapt_target(cfg: ExperimentConfig, out: Layout, name: str, force: bool = False):
    task_model = load_task_model(cfg, out, force)
    pretrained = load_pretrained_adapter(cfg, out, task_model, force)
    ds, patches = load_patches(cfg, out, name, force)
    state, report = run_adaptation(cfg, pretrained, patches, cfg.adapt, cfg.seed)
    report.update(provenance(cfg))
    report["target"] = name
    report["dataset_hash"] = tasks.dataset_hash(ds)
    report["checkpoint_sha256"] = save_checkpoint_with_meta(out.adapter(name), ad.save_state, state, provenance(cfg))
    write_json(out.report(f"adapt_{name}"), report)
    plots.adaptation_trajectory(report, out.figure(f"adapt_{name}"))
    return state, report


def evaluate_stage(cfg: ExperimentConfig, out: Layout, name: str, adapted: bool, force: bool = False) -> dict:
    """Metrics on one dataset, optionally through that target's adapted network."""
    task_model = load_task_model(cfg, out, force)
    ds, patches = load_patches(cfg, out, name, force)
    labels = _labels(cfg, patches, _per_layer(cfg))
    state = None
    if adapted:
        path = out.adapter(name)
        load_meta(path, cfg, f"adapter for {name}", force)
        sensor = SceneRenderer(grid_of(cfg)).sensor(cfg.source.illuminant_id)
        state = ad.load_state(path, task_model, sensor, cfg.adapt)
    report = evaluate_patches(task_model, patches, labels, state)
    report.update(provenance(cfg))
    report["dataset"] = name
    report["dataset_hash"] = tasks.dataset_hash(ds)
    report["adapted"] = adapted
    report["thickness_metric"] = "mean absolute error (nm)"
    tag = f"eval_{name}" + ("_adapted" if adapted else "")
    write_predictions_csv(out.report(tag).with_suffix(".csv"), report["predictions"])
    report["predictions_file"] = str(Path("reports") / f"{tag}.csv")
    write_json(out.report(tag), report)
    return report


def write_predictions_csv(path: Path, preds: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "pred", "thickness_nm", "thickness_pred_nm"])
        tp = preds["thickness_pred_nm"] or [None] * len(preds["label"])
        for i, row in enumerate(zip(preds["label"], preds["pred"], preds["thickness_nm"], tp)):
            w.writerow([i, *row])


def _brief(metrics: dict) -> dict:
    return {k: metrics[k] for k in ("accuracy", "per_class_accuracy", "confusion_matrix", "thickness_mae_nm", "n") if k in metrics}


# ---------------------------------------------------------------- end to end


def pipeline(cfg: ExperimentConfig, force: bool = False, ablation: bool = False, workers: int = 1) -> dict:
    """gen-data, train, pretrain, evaluate before, adapt, evaluate after; one consolidated report."""
    out = Layout(cfg.output_dir)
    prepare(cfg)
    stage = "gen-data"
    try:
        gen = gen_data(cfg, out, force=force, reuse=True, workers=workers)
        stage = "train"
        model, train_report = train(cfg, out, force=force)
        stage = "pretrain-adapt"
        pretrained, pre_report = pretrain_adapter(cfg, out, task_model=model, force=force)
        stage = "eval"
        _, src_patches = load_patches(cfg, out, SOURCE, force)
        src_labels = _labels(cfg, src_patches, _per_layer(cfg))
        _, val = tasks.split_indices(len(src_patches), cfg.train.val_fraction, cfg.seed)
        source_metrics = evaluate_patches(model, src_patches.subset(val), src_labels[val])
        identity_metrics = evaluate_patches(model, src_patches.subset(val), src_labels[val], pretrained.copy())
        targets = {}
        for name in target_configs(cfg):
            stage = f"eval:{name}"
            ds, patches = load_patches(cfg, out, name, force)
            labels = _labels(cfg, patches, _per_layer(cfg))
            before = evaluate_patches(model, patches, labels)
            before_network = evaluate_patches(model, patches, labels, pretrained.copy())
            stage = f"adapt:{name}"
            state, adapt_report = run_adaptation(cfg, pretrained, patches, cfg.adapt, cfg.seed)
            adapt_report.update(provenance(cfg))
            save_checkpoint_with_meta(out.adapter(name), ad.save_state, state, provenance(cfg))
            write_json(out.report(f"adapt_{name}"), adapt_report)
            plots.adaptation_trajectory(adapt_report, out.figure(f"adapt_{name}"))
            stage = f"eval:{name}"
            after = evaluate_patches(model, patches, labels, state)
            gap = source_metrics["accuracy"] - before["accuracy"]
            targets[name] = {
                "domain": ds.manifest["domain"],
                "dataset_hash": tasks.dataset_hash(ds),
                "pre_adapt": _brief(before),
                "pretrained_network_no_entropy": _brief(before_network),
                "post_adapt": _brief(after),
                "gap": gap,
                "recovered_fraction": (after["accuracy"] - before["accuracy"]) / gap if gap > 0 else None,
                "task_model_unchanged": adapt_report["task_model_digest_before"] == adapt_report["task_model_digest_after"],
                "entropy_before": adapt_report["history"][0]["entropy"] if adapt_report["history"] else None,
                "entropy_after": adapt_report["final_mean_entropy"],
                "adapt_wall_time_s": adapt_report["wall_time_s"],
            }
            plots.accuracy_comparison(
                {"source_accuracy": source_metrics["accuracy"], "target_pre_accuracy": before["accuracy"], "target_post_accuracy": after["accuracy"]},
                out.figure(f"accuracy_{name}"),
            )
        report = {
            **provenance(cfg),
            "config": {k: v for k, v in to_dict(cfg).items() if k != "output_dir"},
            "datasets": gen["datasets"],
            "training": {k: train_report[k] for k in ("classification", "thickness", "backbone_unchanged_by_thickness_head", "n_patches")},
            "pretraining": {k: pre_report[k] for k in ("colornorm", "specinv", "d_out", "n_crops")},
            "source": _brief(source_metrics),
            "source_through_pretrained_network": _brief(identity_metrics),
            "targets": targets,
            "task_model_sha256": train_report["checkpoint_sha256"],
        }
        if ablation:
            stage = "ablation"
            report["ablation"] = run_ablation(cfg, out, force=force)
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    write_json(out.report("pipeline"), report)
    return report


def run_ablation(cfg: ExperimentConfig, out: Layout, force: bool = False) -> list:
    """Seven toggle combinations on the first target, averaged over ``cfg.ablation_seeds``.

    Each seed retrains the task model and the pretrained adapter so the
    spread reflects initialization as well as adaptation order.
    """
    name = next(iter(target_configs(cfg)))
    _, src = load_patches(cfg, out, SOURCE, force)
    _, patches = load_patches(cfg, out, name, force)
    labels = _labels(cfg, patches, _per_layer(cfg))
    per_seed = {label: [] for label, _ in ABLATION_ROWS}
    for seed in cfg.ablation_seeds:
        model, _ = train(cfg, out, force=force, seed=seed, write=False)
        pretrained, _ = pretrain_adapter(cfg, out, task_model=model, force=force, seed=seed, write=False)
        for label, toggles in ABLATION_ROWS:
            if toggles is None:
                acc = evaluate_patches(model, patches, labels)["accuracy"]
            else:
                state, _ = run_adaptation(cfg, pretrained, patches, _with_toggles(cfg.adapt, toggles), seed)
                acc = evaluate_patches(model, patches, labels, state)["accuracy"]
            per_seed[label].append(acc)
            log.info("ablation seed %d %-52s %.4f", seed, label, acc)
    rows = []
    for label, toggles in ABLATION_ROWS:
        accs = per_seed[label]
        flags = toggles or (False, False, False, False)
        rows.append(
            {
                "label": label,
                "colornorm": flags[0],
                "source_transform": flags[1],
                "entropy": flags[2],
                "neighbour_penalty": flags[3],
                "accuracies": accs,
                "mean_accuracy": float(np.mean(accs)),
                "std_accuracy": float(np.std(accs)),
            }
        )
    write_json(out.report("ablation"), {**provenance(cfg), "target": name, "seeds": list(cfg.ablation_seeds), "rows": rows})
    with open(out.report("ablation").with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "colornorm", "source_transform", "entropy", "neighbour_penalty", "mean_accuracy", "std_accuracy", *[f"seed_{s}" for s in cfg.ablation_seeds]])
        for r in rows:
            w.writerow([r["label"], int(r["colornorm"]), int(r["source_transform"]), int(r["entropy"]), int(r["neighbour_penalty"]), f"{r['mean_accuracy']:.6f}", f"{r['std_accuracy']:.6f}", *[f"{a:.6f}" for a in r["accuracies"]]])
    plots.ablation_bars(rows, out.figure("ablation"))
    return rows


def ablation_ordering(rows: list) -> dict:
    """Checks: none < entropy < ST+entropy <= ST+entropy+neighbour, full is the maximum."""
    m = {r["label"]: r["mean_accuracy"] for r in rows}
    full = ABLATION_ROWS[-1][0]
    checks = {
        "no_adaptation_lt_entropy": m["no adaptation"] < m["entropy"],
        "entropy_lt_source_transform": m["entropy"] < m["source transform + entropy"],
        "source_transform_le_with_neighbour": m["source transform + entropy"] <= m["source transform + entropy + neighbour"],
        "full_is_maximum": all(m[full] >= v for v in m.values()),
    }
    return checks


def strip_volatile(obj):
    """Drop wall-clock fields so two runs can be compared byte for byte."""
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if "wall_time" not in k and "timestamp" not in k}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj
