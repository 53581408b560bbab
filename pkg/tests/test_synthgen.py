import json

import numpy as np
import pytest

from flakeadapt import colorimetry as cm
from flakeadapt.config import SceneConfig, ShapeConfig
from flakeadapt.optics import SpectralGrid
from flakeadapt.synthgen import (
    LAYER_CLASSES,
    SOURCE_DOMAIN,
    Dataset,
    DomainSpec,
    SceneRenderer,
    class_frequencies,
    compose_scene,
    emit_dataset,
    layer_class,
    polygon_area,
    pseudo_target_domain,
    rasterize,
    render_scene,
    sample_flake_polygon,
    scene_rng,
)
from harness import rederive_pixel

GRID = SpectralGrid.uniform()
PER_LAYER = {"graphene": 0.335, "mos2": 0.65, "hbn": 0.333}


def segments_cross(p1, p2, q1, q2):
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    return orient(p1, p2, q1) * orient(p1, p2, q2) < 0 and orient(q1, q2, p1) * orient(q1, q2, p2) < 0


def is_simple(poly):
    k = len(poly)
    for i in range(k):
        for j in range(i + 1, k):
            if abs(i - j) in (1, k - 1):
                continue
            if segments_cross(poly[i], poly[(i + 1) % k], poly[j], poly[(j + 1) % k]):
                return False
    return True


class TestPolygon:
    def test_deterministic(self):
        a = sample_flake_polygon(np.random.default_rng(42), (0, 0, 64, 64), ShapeConfig())
        b = sample_flake_polygon(np.random.default_rng(42), (0, 0, 64, 64), ShapeConfig())
        np.testing.assert_array_equal(a, b)

    def test_simple_and_inside(self):
        rng = np.random.default_rng(0)
        bounds = (5.0, 10.0, 60.0, 50.0)
        for _ in range(200):
            poly = sample_flake_polygon(rng, bounds, ShapeConfig(r_max_px=15))
            assert poly is not None
            assert is_simple(poly)
            assert np.all(poly[:, 0] >= bounds[0]) and np.all(poly[:, 0] <= bounds[2])
            assert np.all(poly[:, 1] >= bounds[1]) and np.all(poly[:, 1] <= bounds[3])
            assert polygon_area(poly) >= 25

    def test_vertex_counts(self):
        rng = np.random.default_rng(1)
        ks = {len(sample_flake_polygon(rng, (0, 0, 96, 96), ShapeConfig())) for _ in range(1000)}
        assert min(ks) >= 5 and max(ks) <= 12

    def test_too_small_gives_up(self):
        cfg = ShapeConfig(r_max_px=2, min_area_px=25, retries=3)
        assert sample_flake_polygon(np.random.default_rng(0), (0, 0, 64, 64), cfg) is None

    def test_degenerate_bounds(self):
        with pytest.raises(ValueError):
            sample_flake_polygon(np.random.default_rng(0), (5, 5, 5, 10), ShapeConfig())

    def test_rasterize_square(self):
        poly = np.array([[2.0, 2.0], [6.0, 2.0], [6.0, 6.0], [2.0, 6.0]])
        mask = rasterize(poly, 10, 10)
        assert mask.sum() == 16
        assert mask[2:6, 2:6].all()


def test_layer_classes():
    assert layer_class(1) == "monolayer"
    assert layer_class(2) == layer_class(9) == "fewlayer"
    assert layer_class(10) == layer_class(40) == "thicklayer"


class TestScene:
    def test_empty(self):
        scene = compose_scene(np.random.default_rng(0), SceneConfig(min_flakes=0, max_flakes=0), PER_LAYER)
        assert scene.flakes == []
        assert not scene.label_map.any()

    def test_disjoint_and_consistent(self):
        cfg = SceneConfig(materials=["graphene", "mos2"])
        for i in range(30):
            scene = compose_scene(scene_rng(3, i), cfg, PER_LAYER)
            masks = [rasterize(f.polygon, cfg.width, cfg.height) for f in scene.flakes]
            for a in range(len(masks)):
                for b in range(a + 1, len(masks)):
                    assert not (masks[a] & masks[b]).any()
            for k, f in enumerate(scene.flakes, start=1):
                assert f.area_px == int((scene.label_map == k).sum()) == int(masks[k - 1].sum())
                assert f.thickness_nm == pytest.approx(f.layer_count * PER_LAYER[f.material_id])
            assert scene.label_map.max() == len(scene.flakes)
            tm = scene.thickness_map
            assert np.all((tm == 0) == (scene.label_map == 0))

    def test_deterministic(self):
        a = compose_scene(scene_rng(9, 4), SceneConfig(), PER_LAYER)
        b = compose_scene(scene_rng(9, 4), SceneConfig(), PER_LAYER)
        np.testing.assert_array_equal(a.label_map, b.label_map)

    def test_class_balance(self):
        cfg = SceneConfig()
        expected = class_frequencies(cfg)
        assert expected["monolayer"] == pytest.approx(1 / 12)
        counts = dict.fromkeys(LAYER_CLASSES, 0)
        for i in range(1000):
            for f in compose_scene(scene_rng(11, i), cfg, PER_LAYER).flakes:
                counts[f.layer_class] += 1
        total = sum(counts.values())
        for c in LAYER_CLASSES:
            assert abs(counts[c] / total - expected[c]) < 0.05


@pytest.fixture(scope="module")
def renderer():
    return SceneRenderer(GRID)


@pytest.fixture(scope="module")
def scene():
    return compose_scene(scene_rng(5, 0), SceneConfig(materials=["graphene", "hbn"]), PER_LAYER)


class TestRender:

    def test_identity_domain(self, renderer, scene):
        rgb, spec = renderer.render(scene, SOURCE_DOMAIN)
        np.testing.assert_allclose(rgb, cm.render(spec, renderer.sensor("d65")), rtol=0, atol=1e-14)

    def test_gain_ratio(self, renderer, scene):
        d1 = DomainSpec("d65", (1.2, 0.8, 1.0), 0)
        d2 = DomainSpec("d65", (0.6, 1.6, 0.9), 0)
        x1, _ = renderer.render(scene, d1)
        x2, _ = renderer.render(scene, d2)
        ratio = np.array(d1.G) / np.array(d2.G)
        np.testing.assert_allclose(x1, x2 * ratio, rtol=1e-13, atol=0)

    def test_shared_stack_identical_pixels(self, renderer):
        scene = compose_scene(scene_rng(5, 1), SceneConfig(layer_counts=[3], min_flakes=3, max_flakes=3), PER_LAYER)
        rgb, _ = renderer.render(scene, SOURCE_DOMAIN)
        flake_px = rgb[scene.label_map > 0]
        assert (flake_px == flake_px[0]).all()
        bg = rgb[scene.label_map == 0]
        assert (bg == bg[0]).all()

    def test_free_function_matches(self, renderer, scene):
        dom = pseudo_target_domain(3)
        a, _ = renderer.render(scene, dom)
        b, _ = render_scene(scene, cm.default_sensor(GRID, dom.illuminant_id), dom)
        np.testing.assert_array_equal(a, b)


def test_pseudo_target_gains():
    for s in range(50):
        d = pseudo_target_domain(s)
        assert all(0.6 <= g <= 1.6 for g in d.G)
        assert d.illuminant_id == "a"
    assert pseudo_target_domain(3) == pseudo_target_domain(3)


def test_domain_rejects_nonpositive():
    with pytest.raises(ValueError):
        DomainSpec("d65", (1.0, 0.0, 1.0), 0)


class TestEmit:
    def test_single(self, tmp_path):
        m = emit_dataset(1, SceneConfig(), SOURCE_DOMAIN, tmp_path)
        ann = json.loads((tmp_path / "annotations.json").read_text())
        assert len(ann["images"]) == 1
        assert (tmp_path / ann["images"][0]["file"]).exists()
        assert m["count"] == 1
        inst = ann["instances"][0]
        for key in ("image_id", "polygon", "material_id", "layer_count", "thickness_nm", "layer_class", "bbox"):
            assert key in inst
        assert set(ann["images"][0]["domain"]) == {"illuminant_id", "G", "seed"}

    def test_instance_count(self, tmp_path):
        cfg = SceneConfig()
        m = emit_dataset(100, cfg, SOURCE_DOMAIN, tmp_path, write_png=False)
        expected = 100 * (cfg.min_flakes + cfg.max_flakes) / 2
        assert abs(m["instance_count"] - expected) <= 0.2 * expected

    def test_deterministic_and_thread_independent(self, tmp_path):
        dom = pseudo_target_domain(4)
        emit_dataset(12, SceneConfig(), dom, tmp_path / "a", write_png=False)
        emit_dataset(12, SceneConfig(), dom, tmp_path / "b", write_png=False, workers=3)
        a = (tmp_path / "a" / "annotations.json").read_bytes()
        assert a == (tmp_path / "b" / "annotations.json").read_bytes()
        for i in range(12):
            fa = (tmp_path / "a" / "images" / f"{i:06d}.fimg").read_bytes()
            assert fa == (tmp_path / "b" / "images" / f"{i:06d}.fimg").read_bytes()

    def test_per_pixel_oracle(self, tmp_path):
        """Rebuild sampled pixels from dispersion files, a fresh TMM stack and the sensor assets."""
        dom = pseudo_target_domain(6)
        emit_dataset(5, SceneConfig(materials=["graphene", "mos2"]), dom, tmp_path, write_png=False)
        ds = Dataset.load(tmp_path)
        sensor = cm.default_sensor(GRID, dom.illuminant_id)
        rng = np.random.default_rng(0)
        for image_id in range(5):
            img = ds.image(image_id)
            h, w = img.shape[:2]
            for _ in range(10):
                y, x = rng.integers(0, h), rng.integers(0, w)
                np.testing.assert_allclose(img[y, x], rederive_pixel(ds, image_id, y, x, GRID, sensor, dom.G), rtol=0, atol=1e-9)

    def test_annotation_areas_match_labels(self, tmp_path):
        emit_dataset(8, SceneConfig(), SOURCE_DOMAIN, tmp_path, write_png=False)
        ds = Dataset.load(tmp_path)
        for a in ds.instances:
            assert int((ds.label_map(a["image_id"]) == a["label"]).sum()) == a["area_px"]

    def test_missing_material(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="unobtainium"):
            emit_dataset(1, SceneConfig(materials=["unobtainium"]), SOURCE_DOMAIN, tmp_path)
