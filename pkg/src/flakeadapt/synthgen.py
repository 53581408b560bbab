"""Synthetic flake scenes, their rendering, and dataset emission."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.path import Path as MplPath

from . import colorimetry as cm
from .config import DomainConfig, SceneConfig, ShapeConfig, canonical_json, hash_obj
from .optics import SpectralGrid, SpectrumCache

log = logging.getLogger(__name__)

LAYER_CLASSES = ("monolayer", "fewlayer", "thicklayer")


def layer_class(layer_count: int) -> str:
    if layer_count < 1:
        raise ValueError("flakes have at least one layer")
    if layer_count == 1:
        return "monolayer"
    return "fewlayer" if layer_count <= 9 else "thicklayer"


@dataclass
class FlakeInstance:
    polygon: np.ndarray
    material_id: str
    layer_count: int
    thickness_nm: float
    area_px: int = 0

    @property
    def layer_class(self) -> str:
        return layer_class(self.layer_count)

    def bbox(self):
        x0, y0 = self.polygon.min(axis=0)
        x1, y1 = self.polygon.max(axis=0)
        return [float(x0), float(y0), float(x1 - x0), float(y1 - y0)]


@dataclass
class FlakeScene:
    width: int
    height: int
    substrate_sio2_nm: float
    flakes: list = field(default_factory=list)
    label_map: np.ndarray | None = None

    def __post_init__(self):
        if self.label_map is None:
            self.label_map = np.zeros((self.height, self.width), dtype=np.int32)

    @property
    def thickness_map(self) -> np.ndarray:
        lut = np.array([0.0] + [f.thickness_nm for f in self.flakes])
        return lut[self.label_map]


@dataclass(frozen=True)
class DomainSpec:
    illuminant_id: str
    G: tuple
    seed: int

    def __post_init__(self):
        G = tuple(float(g) for g in self.G)
        if len(G) != 3 or not all(g > 0 for g in G):
            raise ValueError(f"G must be three positive gains, got {self.G!r}")
        object.__setattr__(self, "G", G)

    def to_json(self):
        return {"illuminant_id": self.illuminant_id, "G": list(self.G), "seed": int(self.seed)}


SOURCE_DOMAIN = DomainSpec("d65", (1.0, 1.0, 1.0), 1)


def pseudo_target_domain(seed: int, illuminant_id: str = "a", lo: float = 0.6, hi: float = 1.6) -> DomainSpec:
    """Target domain with log-uniform white-balance gains and another illuminant."""
    rng = np.random.default_rng([seed, 0x6A1])
    G = np.exp(rng.uniform(math.log(lo), math.log(hi), size=3))
    return DomainSpec(illuminant_id, tuple(G), seed)


def resolve_domain(dc: DomainConfig) -> DomainSpec:
    if dc.G is None:
        return pseudo_target_domain(dc.seed, dc.illuminant_id)
    return DomainSpec(dc.illuminant_id, tuple(dc.G), dc.seed)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def sample_flake_polygon(rng: np.random.Generator, bounds, cfg: ShapeConfig) -> np.ndarray | None:
    """Star-convex polygon inside ``bounds`` = (x0, y0, x1, y1), or None.

    Vertices sit at sorted, distinct angles around the center, so the
    boundary never crosses itself. Shapes under the minimum area are
    resampled up to ``cfg.retries`` times.
    """
    x0, y0, x1, y1 = bounds
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bounds {bounds}")
    r_max = min(cfg.r_max_px, (x1 - x0) / 2, (y1 - y0) / 2)
    for _ in range(max(1, cfg.retries)):
        k = int(rng.integers(cfg.min_vertices, cfg.max_vertices + 1))
        # jittered angles: one per sector keeps them sorted and distinct
        angles = (np.arange(k) + rng.uniform(0.1, 0.9, size=k)) * (2 * np.pi / k) + rng.uniform(0, 2 * np.pi)
        radii = rng.uniform(cfg.radius_lo, cfg.radius_hi, size=k) * r_max
        cx = rng.uniform(x0 + r_max, x1 - r_max) if x1 - x0 > 2 * r_max else (x0 + x1) / 2
        cy = rng.uniform(y0 + r_max, y1 - r_max) if y1 - y0 > 2 * r_max else (y0 + y1) / 2
        poly = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        if polygon_area(poly) >= cfg.min_area_px:
            return poly
    return None


def rasterize(poly: np.ndarray, width: int, height: int) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside ``poly``."""
    x0, y0 = np.floor(poly.min(axis=0)).astype(int)
    x1, y1 = np.ceil(poly.max(axis=0)).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, width), min(y1, height)
    mask = np.zeros((height, width), dtype=bool)
    if x1 <= x0 or y1 <= y0:
        return mask
    yy, xx = np.mgrid[y0:y1, x0:x1]
    pts = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=1)
    inside = MplPath(poly).contains_points(pts)
    mask[y0:y1, x0:x1] = inside.reshape(yy.shape)
    return mask


def layer_distribution(cfg: SceneConfig):
    counts = np.array(cfg.layer_counts, dtype=int)
    w = np.ones(len(counts)) if cfg.layer_weights is None else np.asarray(cfg.layer_weights, dtype=float)
    return counts, w / w.sum()


def class_frequencies(cfg: SceneConfig) -> dict:
    counts, p = layer_distribution(cfg)
    out = dict.fromkeys(LAYER_CLASSES, 0.0)
    for n, q in zip(counts, p):
        out[layer_class(int(n))] += q
    return out


def compose_scene(rng: np.random.Generator, cfg: SceneConfig, per_layer_nm: dict) -> FlakeScene:
    """Place non-overlapping flakes; gives up on a flake after bounded retries."""
    scene = FlakeScene(cfg.width, cfg.height, cfg.substrate_sio2_nm)
    counts, probs = layer_distribution(cfg)
    n_target = int(rng.integers(cfg.min_flakes, cfg.max_flakes + 1))
    occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
    bounds = (0.0, 0.0, float(cfg.width), float(cfg.height))
    for _ in range(n_target):
        material = cfg.materials[int(rng.integers(len(cfg.materials)))]
        layers = int(rng.choice(counts, p=probs))
        placed = False
        for _ in range(cfg.placement_retries):
            poly = sample_flake_polygon(rng, bounds, cfg.shape)
            if poly is None:
                continue
            mask = rasterize(poly, cfg.width, cfg.height)
            if not mask.any() or (mask & occupied).any():
                continue
            occupied |= mask
            idx = len(scene.flakes) + 1
            scene.label_map[mask] = idx
            scene.flakes.append(FlakeInstance(poly, material, layers, layers * per_layer_nm[material], int(mask.sum())))
            placed = True
            break
        if not placed:
            log.debug("dropped a flake after %d placement attempts", cfg.placement_retries)
    return scene


class SceneRenderer:
    """Renders scenes for one grid, caching spectra and per-domain sensors."""

    def __init__(self, grid: SpectralGrid, materials_dir=None):
        self.grid = grid
        self.cache = SpectrumCache(grid, materials_dir)
        self._sensors: dict[str, cm.SensorModel] = {}

    def sensor(self, illuminant_id: str) -> cm.SensorModel:
        if illuminant_id not in self._sensors:
            self._sensors[illuminant_id] = cm.default_sensor(self.grid, illuminant_id)
        return self._sensors[illuminant_id]

    def per_layer_nm(self, materials) -> dict:
        out = {}
        for m in materials:
            t = self.cache.material(m).per_layer_thickness_nm
            if t is None:
                raise ValueError(f"material {m!r} has no per_layer_thickness_nm")
            out[m] = t
        return out

    def spectral_image(self, scene: FlakeScene) -> np.ndarray:
        return spectra_table(scene, self.cache)[scene.label_map]

    def render(self, scene: FlakeScene, domain: DomainSpec):
        return render_scene(scene, self.sensor(domain.illuminant_id), domain, self.cache)


def spectra_table(scene: FlakeScene, cache: SpectrumCache) -> np.ndarray:
    """Row 0 is bare substrate, row i the spectrum of flake i."""
    rows = [cache.reflectance(None, 0, scene.substrate_sio2_nm)]
    rows += [cache.reflectance(f.material_id, f.layer_count, scene.substrate_sio2_nm) for f in scene.flakes]
    return np.stack(rows)


def render_scene(scene: FlakeScene, sensor: cm.SensorModel, domain: DomainSpec, cache: SpectrumCache | None = None):
    """(RgbImage, SpectralImage) for ``scene`` seen through ``sensor`` and domain gains.

    ``sensor`` must already carry the domain's illuminant.
    """
    table = spectra_table(scene, cache or SpectrumCache(sensor.grid))
    # one TMM spectrum per distinct stack; pixels index into it
    rgb_lut = cm.apply_domain(cm.render(table, sensor), domain.G)
    return rgb_lut[scene.label_map], table[scene.label_map]


def scene_annotations(scene: FlakeScene, image_id: int):
    out = []
    for i, f in enumerate(scene.flakes, start=1):
        out.append(
            {
                "image_id": image_id,
                "label": i,
                "polygon": [[round(float(x), 6), round(float(y), 6)] for x, y in f.polygon],
                "material_id": f.material_id,
                "layer_count": f.layer_count,
                "thickness_nm": round(f.thickness_nm, 9),
                "layer_class": f.layer_class,
                "bbox": [round(v, 6) for v in f.bbox()],
                "area_px": f.area_px,
            }
        )
    return out


def emit_dataset(
    count: int,
    scene_cfg: SceneConfig,
    domain: DomainSpec,
    out_dir,
    grid: SpectralGrid | None = None,
    materials_dir=None,
    config_hash: str = "",
    git_describe: str = "",
    workers: int = 1,
    write_png: bool = True,
) -> dict:
    """Write ``count`` rendered scenes plus annotations; returns the manifest.

    Scene ``i`` draws from an RNG seeded by ``(domain.seed, i)``, so output
    does not depend on ``workers``.
    """
    grid = grid or SpectralGrid.uniform()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    renderer = SceneRenderer(grid, materials_dir)
    per_layer = renderer.per_layer_nm(scene_cfg.materials)
    renderer.sensor(domain.illuminant_id)
    for m in scene_cfg.materials:
        for n in scene_cfg.layer_counts:
            renderer.cache.reflectance(m, int(n), scene_cfg.substrate_sio2_nm)
    renderer.cache.reflectance(None, 0, scene_cfg.substrate_sio2_nm)

    def make(i):
        scene = compose_scene(scene_rng(domain.seed, i), scene_cfg, per_layer)
        rgb, _ = renderer.render(scene, domain)
        stem = f"{i:06d}"
        try:
            cm.save_float_image(out / "images" / f"{stem}.fimg", rgb, double=True)
            if write_png:
                cm.save_png(out / "images" / f"{stem}.png", rgb)
            np.save(out / "labels" / f"{stem}.npy", scene.label_map.astype(np.uint16))
        except OSError as exc:
            raise OSError(f"failed writing scene {stem} under {out}: {exc}") from exc
        return scene

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scenes = list(pool.map(make, range(count)))
    else:
        scenes = [make(i) for i in range(count)]

    images, instances = [], []
    for i, scene in enumerate(scenes):
        stem = f"{i:06d}"
        images.append(
            {
                "id": i,
                "file": f"images/{stem}.png",
                "float_file": f"images/{stem}.fimg",
                "label_file": f"labels/{stem}.npy",
                "width": scene.width,
                "height": scene.height,
                "substrate_sio2_nm": scene.substrate_sio2_nm,
                "domain": domain.to_json(),
            }
        )
        instances.extend(scene_annotations(scene, i))
    annotations = {"images": images, "instances": instances}
    ann_text = canonical_json(annotations)
    try:
        (out / "annotations.json").write_text(ann_text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing {out / 'annotations.json'}: {exc}") from exc
    manifest = {
        "count": count,
        "seed": domain.seed,
        "scene_seeds": [[domain.seed, i] for i in range(count)],
        "domain": domain.to_json(),
        "scene_config": scene_cfg,
        "grid": {"start": float(grid.wavelengths_nm[0]), "stop": float(grid.wavelengths_nm[-1]), "count": grid.size},
        "config_hash": config_hash,
        "git_describe": git_describe,
        "annotations": "annotations.json",
        "annotations_sha256": hash_obj(annotations),
        "files": [im["float_file"] for im in images],
        "instance_count": len(instances),
    }
    manifest = json.loads(canonical_json(manifest))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


@dataclass
class Dataset:
    """An emitted dataset loaded back from disk."""

    root: Path
    manifest: dict
    images: list
    instances: list

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        ann = json.loads((root / manifest["annotations"]).read_text(encoding="utf-8"))
        return cls(root, manifest, ann["images"], ann["instances"])

    def image(self, image_id: int) -> np.ndarray:
        return cm.load_float_image(self.root / self.images[image_id]["float_file"])

    def label_map(self, image_id: int) -> np.ndarray:
        return np.load(self.root / self.images[image_id]["label_file"]).astype(np.int32)

    def scene(self, image_id: int) -> FlakeScene:
        meta = self.images[image_id]
        anns = sorted((a for a in self.instances if a["image_id"] == image_id), key=lambda a: a["label"])
        flakes = [
            FlakeInstance(np.array(a["polygon"]), a["material_id"], a["layer_count"], a["thickness_nm"], a["area_px"])
            for a in anns
        ]
        return FlakeScene(meta["width"], meta["height"], meta["substrate_sio2_nm"], flakes, self.label_map(image_id))

    @property
    def domain(self) -> DomainSpec:
        d = self.manifest["domain"]
        return DomainSpec(d["illuminant_id"], tuple(d["G"]), d["seed"])
