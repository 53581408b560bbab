import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flakeadapt import optics
from flakeadapt.optics import LayerStack, SpectralGrid
from oracles import rouard_reflectance

GRID = SpectralGrid.uniform()


def write_table(tmp_path, rows, name="mat", per_layer=None):
    p = tmp_path / f"{name}.csv"
    lines = []
    if per_layer is not None:
        lines.append(f"# per_layer_thickness_nm={per_layer}")
    lines.append("wavelength_nm,n,k")
    lines += [",".join(map(str, r)) for r in rows]
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def random_stack(rng, lossless=True):
    n_layers = rng.integers(1, 6)
    d = GRID.size
    media = [np.full(d, complex(rng.uniform(1, 4)))]
    thick = []
    for _ in range(n_layers):
        n = rng.uniform(1, 4, size=d)
        k = np.zeros(d) if lossless else rng.uniform(0, 1, size=d)
        media.append(n - 1j * k)
        thick.append(rng.uniform(1, 1000))
    out_k = 0.0 if lossless else rng.uniform(0, 0.5)
    media.append(np.full(d, complex(rng.uniform(1, 4), -out_k)))
    stack = LayerStack.build(GRID, media[0], list(zip(media[1:-1], thick)), media[-1])
    return stack, media, thick


class TestSpectralGrid:
    def test_default(self):
        assert GRID.size == 128
        assert GRID.wavelengths_nm[0] == 380.0
        assert GRID.wavelengths_nm[-1] == 780.0

    @pytest.mark.parametrize("w", [[500.0], [400.0, 400.0], [400.0, 500.0, 700.0]])
    def test_rejects_bad(self, w):
        with pytest.raises(ValueError):
            SpectralGrid(np.array(w))


class TestLoadDispersion:
    def test_vacuum(self, tmp_path):
        p = write_table(tmp_path, [(300, 1.0, 0), (900, 1.0, 0)])
        np.testing.assert_array_equal(optics.load_dispersion(p, GRID), np.ones(128, dtype=complex))

    def test_constant_interp(self, tmp_path):
        p = write_table(tmp_path, [(400, 1.5, 0), (700, 1.5, 0)])
        out = optics.load_dispersion(p, SpectralGrid(np.array([550.0, 600.0])))
        assert out[0] == 1.5 + 0j

    def test_linear_interp(self, tmp_path):
        p = write_table(tmp_path, [(400, 1.0, 0), (600, 2.0, 0)])
        out = optics.load_dispersion(p, SpectralGrid(np.array([500.0, 550.0])))
        assert out[0] == pytest.approx(1.5)
        assert out[1] == pytest.approx(1.75)

    def test_k_is_negative_imaginary(self, tmp_path):
        p = write_table(tmp_path, [(300, 2.0, 0.5), (900, 2.0, 0.5)])
        assert optics.load_dispersion(p, GRID)[0] == 2.0 - 0.5j

    def test_metadata(self, tmp_path):
        p = write_table(tmp_path, [(300, 2.0, 0.5), (900, 2.0, 0.5)], per_layer=0.7)
        assert optics.read_dispersion(p).per_layer_thickness_nm == 0.7

    def test_malformed_row_reports_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("wavelength_nm,n,k\n400,1,0\n500,abc,0\n", encoding="utf-8")
        with pytest.raises(optics.DispersionParseError, match=":3:"):
            optics.load_dispersion(p, GRID)

    def test_out_of_range_names_material(self, tmp_path):
        p = write_table(tmp_path, [(400, 1.0, 0), (700, 1.0, 0)], name="unobtainium")
        with pytest.raises(optics.DispersionRangeError, match="unobtainium"):
            optics.load_dispersion(p, GRID)

    def test_bundled_materials_cover_grid(self):
        for mid in ["si", "sio2", "graphene", "mos2", "hbn", "wse2"]:
            idx = optics.load_material(mid).index_on(GRID)
            assert np.all(np.isfinite(idx))
            assert np.all(idx.imag <= 0)


class TestFresnel:
    def test_no_change(self):
        assert optics.fresnel_interface(1, 1) == (0, 1)

    def test_air_glass(self):
        r, t = optics.fresnel_interface(1.0, 1.5)
        assert r == pytest.approx(-0.2)
        assert t == pytest.approx(0.8)
        assert abs(r) ** 2 == pytest.approx(0.04)

    def test_reversed(self):
        assert optics.fresnel_interface(1.5, 1.0)[0] == pytest.approx(0.2)

    @given(
        st.complex_numbers(min_magnitude=0.1, max_magnitude=10, allow_nan=False, allow_infinity=False),
        st.complex_numbers(min_magnitude=0.1, max_magnitude=10, allow_nan=False, allow_infinity=False),
    )
    def test_reciprocity(self, a, b):
        if a + b == 0:
            return
        assert optics.fresnel_interface(a, b)[0] == -optics.fresnel_interface(b, a)[0]

    def test_singular(self):
        with pytest.raises(optics.SingularInterfaceError):
            optics.fresnel_interface(1 + 1j, -1 - 1j)


class TestPropagation:
    def test_zero_thickness(self):
        np.testing.assert_array_equal(optics.propagation_matrix(2.0, 0.0, 500.0), np.eye(2))

    def test_full_wave(self):
        np.testing.assert_allclose(optics.propagation_matrix(1.0, 500.0, 500.0), np.eye(2), atol=1e-12)

    def test_quarter_phase(self):
        m = optics.propagation_matrix(2.0, 500.0 / 8, 500.0)
        np.testing.assert_allclose(m, np.diag([-1j, 1j]), atol=1e-12)


class TestStackResponse:
    def test_bare_interface(self):
        stack = LayerStack.build(GRID, 1.0, [], 1.5)
        np.testing.assert_allclose(optics.stack_response(stack).reflectance, 0.04, atol=1e-15)

    def test_quarter_wave_null(self):
        n_sub = 2.25
        n_c = math.sqrt(n_sub)
        lam0 = 550.0
        grid = SpectralGrid(np.array([450.0, 550.0, 650.0]))
        stack = LayerStack.build(grid, 1.0, [(n_c, lam0 / (4 * n_c))], n_sub)
        assert optics.stack_response(stack).reflectance[1] < 1e-9

    def test_sio2_si_matches_rouard(self):
        sio2, si = optics.substrate_layers(GRID)
        stack = LayerStack.build(GRID, 1.0, [(sio2, 290.0)], si)
        ref = rouard_reflectance([np.ones(128), sio2, si], [290.0], GRID.wavelengths_nm)
        np.testing.assert_allclose(optics.stack_response(stack).reflectance, ref, rtol=0, atol=1e-10)

    def test_absorbing_slab_transmits_less(self):
        stack = LayerStack.build(GRID, 1.0, [(1.0 - 0.1j, 200.0)], 1.0)
        resp = optics.stack_response(stack)
        assert np.all(resp.transmittance < 1)
        assert np.all(resp.reflectance + resp.transmittance < 1)

    def test_degenerate_stack(self):
        # metallic-like layer so thick the forward amplitude underflows
        stack = LayerStack.build(GRID, 1.0, [(1.0 - 50j, 1e6)], 1.0)
        with pytest.raises(optics.DegenerateStackError):
            optics.stack_response(stack)

    def test_energy_and_oracle_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            stack, media, thick = random_stack(rng)
            resp = optics.stack_response(stack)
            np.testing.assert_allclose(resp.reflectance + resp.transmittance, 1.0, atol=1e-9)
            ref = rouard_reflectance(media, thick, GRID.wavelengths_nm)
            np.testing.assert_allclose(resp.reflectance, ref, rtol=0, atol=1e-10)

    def test_oracle_lossy(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            stack, media, thick = random_stack(rng, lossless=False)
            ref = rouard_reflectance(media, thick, GRID.wavelengths_nm)
            np.testing.assert_allclose(optics.stack_response(stack).reflectance, ref, rtol=0, atol=1e-10)
            assert np.all((optics.stack_response(stack).reflectance >= 0) & (optics.stack_response(stack).reflectance <= 1))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(1.0, 4.0), st.floats(1.0, 4.0), st.floats(1.0, 1000.0))
    def test_index_matched_layer_invisible(self, n_env, n_sub, d):
        base = LayerStack.build(GRID, 1.0, [(n_env, 100.0)], n_sub)
        # a slab identical to the layer above it just thickens that layer; an
        # extra slab between two identical media must not change reflectance
        a = LayerStack.build(GRID, n_env, [], n_env)
        b = LayerStack.build(GRID, n_env, [(n_env, d)], n_env)
        np.testing.assert_allclose(optics.stack_response(a).reflectance, optics.stack_response(b).reflectance, atol=1e-9)
        assert np.all(np.isfinite(optics.stack_response(base).reflectance))

    def test_continuity_in_thickness(self):
        sio2, si = optics.substrate_layers(GRID)
        r1 = optics.stack_response(LayerStack.build(GRID, 1.0, [(sio2, 290.0)], si)).reflectance
        r2 = optics.stack_response(LayerStack.build(GRID, 1.0, [(sio2, 290.0 + 1e-6)], si)).reflectance
        assert np.max(np.abs(r1 - r2)) < 1e-6

    def test_wavelength_batching_is_pointwise(self):
        sio2, si = optics.substrate_layers(GRID)
        full = optics.stack_response(LayerStack.build(GRID, 1.0, [(sio2, 290.0)], si)).reflectance
        sub = SpectralGrid(GRID.wavelengths_nm[10:20])
        part = optics.stack_response(LayerStack.build(sub, 1.0, [(sio2[10:20], 290.0)], si[10:20])).reflectance
        np.testing.assert_array_equal(full[10:20], part)


class TestFlakeReflectance:
    def test_zero_layers_is_bare_substrate(self):
        g = optics.load_material("graphene")
        sio2, si = optics.substrate_layers(GRID)
        bare = optics.stack_response(LayerStack.build(GRID, 1.0, [(sio2, 290.0)], si)).reflectance
        np.testing.assert_array_equal(optics.flake_reflectance(g, 0, 290.0, GRID), bare)

    def test_mono_vs_bilayer_contrast(self):
        g = optics.load_material("graphene")
        r1 = optics.flake_reflectance(g, 1, 290.0, GRID)
        r2 = optics.flake_reflectance(g, 2, 290.0, GRID)
        sio2, si = optics.substrate_layers(GRID)
        idx = g.index_on(GRID)
        o1 = rouard_reflectance([np.ones(128), idx, sio2, si], [0.335, 290.0], GRID.wavelengths_nm)
        o2 = rouard_reflectance([np.ones(128), idx, sio2, si], [0.67, 290.0], GRID.wavelengths_nm)
        assert np.max(np.abs(o1 - o2)) > 1e-4
        np.testing.assert_allclose(r1, o1, atol=1e-10)
        np.testing.assert_allclose(r2, o2, atol=1e-10)

    @pytest.mark.parametrize("mid", ["graphene", "mos2", "hbn", "wse2"])
    def test_sweep_in_range(self, mid):
        table = optics.load_material(mid)
        for layers in range(1, 11):
            r = optics.flake_reflectance(table, layers, 290.0, GRID)
            assert np.all(np.isfinite(r))
            assert np.all((r >= 0) & (r <= 1))

    def test_missing_thickness_metadata(self, tmp_path):
        p = write_table(tmp_path, [(300, 2.0, 0.1), (900, 2.0, 0.1)], name="bulk")
        with pytest.raises(optics.ConfigurationError):
            optics.flake_reflectance(optics.read_dispersion(p), 1, 290.0, GRID)

    def test_cache_returns_identical(self):
        cache = optics.SpectrumCache(GRID)
        a = cache.reflectance("graphene", 3, 290.0)
        assert cache.reflectance("graphene", 3, 290.0) is a
        np.testing.assert_array_equal(a, optics.flake_reflectance(optics.load_material("graphene"), 3, 290.0, GRID))
