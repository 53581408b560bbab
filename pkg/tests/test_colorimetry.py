import numpy as np
import pytest

from flakeadapt import assets, colorimetry as cm
from flakeadapt.optics import SpectralGrid, SpectrumCache

GRID = SpectralGrid.uniform()


@pytest.fixture(scope="module")
def sensor():
    return cm.default_sensor(GRID)


def test_zero_illuminant(tmp_path):
    p = tmp_path / "dark.csv"
    p.write_text("wavelength_nm,power\n300,0\n900,0\n", encoding="utf-8")
    with pytest.raises(cm.ColorimetryError, match="degenerate"):
        cm.build_sensor_model(assets.cmf_path(), p, GRID)


def test_single_column_sensor_rows_follow_illuminant():
    I = np.linspace(1, 2, 128)
    S = np.zeros((128, 3))
    S[:, 1] = 1.0
    model = cm.SensorModel(GRID, S, I)
    np.testing.assert_array_equal(model.A[1], I)
    np.testing.assert_array_equal(model.A[0], 0)


def test_bundled_sensor_shape(sensor):
    assert sensor.A.shape == (3, 128)
    assert np.all(sensor.A >= 0)
    np.testing.assert_array_equal(sensor.S.T * sensor.I, sensor.A)
    assert sensor.norm == pytest.approx(sensor.S[:, 1] @ sensor.I)


def test_cmf_range_error():
    with pytest.raises(ValueError, match="outside"):
        cm.default_sensor(SpectralGrid.uniform(300.0, 780.0, 64))


def test_black(sensor):
    np.testing.assert_array_equal(cm.render(np.zeros((2, 2, 128)), sensor), 0)


def test_white_is_d65_white_point(sensor):
    ones = np.ones(128)
    # hand-built XYZ from the raw sums
    hand = np.array([(sensor.S[:, j] * sensor.I).sum() for j in range(3)]) / (sensor.S[:, 1] * sensor.I).sum()
    np.testing.assert_allclose(cm.xyz(ones, sensor), hand, rtol=1e-12)
    np.testing.assert_allclose(hand, [0.9505, 1.0, 1.089], atol=2e-3)
    np.testing.assert_allclose(cm.render(ones, sensor), 1.0, atol=2e-2)


def test_identical_spectra_identical_pixels(sensor):
    rng = np.random.default_rng(0)
    spec = rng.uniform(size=128)
    img = np.stack([spec, spec])[None]
    out = cm.render(img, sensor)
    assert np.array_equal(out[0, 0], out[0, 1])


def test_grid_mismatch(sensor):
    with pytest.raises(cm.ColorimetryError):
        cm.render(np.ones(64), sensor)


def test_linearity(sensor):
    rng = np.random.default_rng(1)
    r1, r2 = rng.uniform(size=(2, 5, 128))
    for a in (0.0, 0.3, 1.0):
        lhs = cm.render(a * r1 + (1 - a) * r2, sensor)
        rhs = a * cm.render(r1, sensor) + (1 - a) * cm.render(r2, sensor)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_lipschitz_bound(sensor):
    bound = np.abs(sensor.rgb_matrix).sum(axis=1).max()
    rng = np.random.default_rng(2)
    for _ in range(50):
        r1, r2 = rng.uniform(size=(2, 128))
        diff = np.abs(cm.render(r1, sensor) - cm.render(r2, sensor)).max()
        assert diff <= bound * np.abs(r1 - r2).max() + 1e-12


def test_grid_convergence():
    s1 = cm.default_sensor(SpectralGrid.uniform(count=128))
    s2 = cm.default_sensor(SpectralGrid.uniform(count=256))
    c1, c2 = SpectrumCache(s1.grid), SpectrumCache(s2.grid)
    for mat in ("graphene", "mos2", "hbn"):
        for layers in (0, 1, 4, 12):
            a = cm.render(c1.reflectance(mat, layers, 290.0), s1)
            b = cm.render(c2.reflectance(mat, layers, 290.0), s2)
            assert np.abs(a - b).max() < 1e-3


class TestApplyDomain:
    def test_identity(self):
        x = np.random.default_rng(3).uniform(size=(4, 4, 3))
        np.testing.assert_array_equal(cm.apply_domain(x, [1, 1, 1]), x)

    def test_red_doubled(self):
        x = np.random.default_rng(3).uniform(size=(4, 4, 3))
        y = cm.apply_domain(x, [2, 1, 1])
        np.testing.assert_array_equal(y[..., 0], 2 * x[..., 0])
        np.testing.assert_array_equal(y[..., 1:], x[..., 1:])

    def test_inverse(self):
        x = np.random.default_rng(3).uniform(size=(4, 4, 3))
        G = np.array([0.7, 1.3, 1.55])
        np.testing.assert_allclose(cm.apply_domain(x, G) / G, x, atol=1e-12)

    @pytest.mark.parametrize("G", [[0, 1, 1], [1, -1, 1], [1, 1]])
    def test_rejects(self, G):
        with pytest.raises(cm.ColorimetryError):
            cm.apply_domain(np.ones((2, 2, 3)), G)


class TestExport:
    def test_float_roundtrip_f32(self, tmp_path):
        x = np.random.default_rng(4).uniform(-0.1, 1.2, size=(5, 7, 3)).astype(np.float32)
        cm.save_float_image(tmp_path / "a.fimg", x)
        np.testing.assert_array_equal(cm.load_float_image(tmp_path / "a.fimg"), x)

    def test_float_roundtrip_f64(self, tmp_path):
        x = np.random.default_rng(4).uniform(size=(5, 7, 3))
        cm.save_float_image(tmp_path / "a.fimg", x, double=True)
        np.testing.assert_array_equal(cm.load_float_image(tmp_path / "a.fimg"), x)

    def test_float_header(self, tmp_path):
        cm.save_float_image(tmp_path / "a.fimg", np.zeros((2, 3, 4), dtype=np.float32))
        raw = (tmp_path / "a.fimg").read_bytes()
        assert raw[:4] == b"FIMG"
        assert int.from_bytes(raw[4:8], "little") == 2
        assert len(raw) == 16 + 2 * 3 * 4 * 4

    def test_png(self, tmp_path):
        from PIL import Image

        x = np.zeros((3, 3, 3))
        x[0, 0] = 1.0
        x[1, 1] = 2.0  # clamped at export only
        cm.save_png(tmp_path / "a.png", x)
        arr = np.asarray(Image.open(tmp_path / "a.png"))
        assert arr.dtype == np.uint8 and arr.shape == (3, 3, 3)
        assert tuple(arr[0, 0]) == (255, 255, 255)
        assert tuple(arr[1, 1]) == (255, 255, 255)
        assert tuple(arr[2, 2]) == (0, 0, 0)

    def test_srgb_curve(self):
        np.testing.assert_allclose(cm.srgb_encode(np.array([0.0, 0.0031308, 0.5, 1.0])), [0, 0.0404499, 0.7353570, 1.0], atol=1e-6)
