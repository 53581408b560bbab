"""Normal-incidence transfer-matrix optics for thin-film stacks.

Stored refractive indices use the ``n - i*k`` convention (``k > 0`` means
absorption). The matrices themselves are written for an ``exp(-i*omega*t)``
time dependence, which pairs with ``n + i*k``; indices are conjugated on the
way in so that absorbing layers attenuate the forward wave. Reflectance and
transmittance do not depend on this choice, only the phase of the returned
amplitudes does.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import assets
from .tabular import TableParseError, TableRangeError, interp_on, read_numeric_csv


class OpticsError(ValueError):
    pass


DispersionParseError = TableParseError
DispersionRangeError = TableRangeError


class SingularInterfaceError(OpticsError):
    pass


class DegenerateStackError(OpticsError):
    pass


class ConfigurationError(OpticsError):
    pass


@dataclass(frozen=True)
class SpectralGrid:
    wavelengths_nm: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.wavelengths_nm, dtype=np.float64)
        if w.ndim != 1 or w.size < 2:
            raise ValueError("spectral grid needs at least 2 wavelengths")
        step = np.diff(w)
        if np.any(step <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        if np.max(np.abs(step - step[0])) > 1e-9 * abs(step[0]):
            raise ValueError("wavelength spacing must be uniform")
        w.setflags(write=False)
        object.__setattr__(self, "wavelengths_nm", w)

    @classmethod
    def uniform(cls, start: float = 380.0, stop: float = 780.0, count: int = 128) -> "SpectralGrid":
        return cls(np.linspace(start, stop, count))

    @property
    def size(self) -> int:
        return self.wavelengths_nm.size

    @property
    def step(self) -> float:
        return float(self.wavelengths_nm[1] - self.wavelengths_nm[0])

    def __len__(self):
        return self.size

    def __eq__(self, other):
        if not isinstance(other, SpectralGrid):
            return NotImplemented
        return self.size == other.size and np.array_equal(self.wavelengths_nm, other.wavelengths_nm)

    def __hash__(self):
        return hash(self.wavelengths_nm.tobytes())


@dataclass(frozen=True)
class DispersionTable:
    material_id: str
    wavelength_nm: np.ndarray
    n: np.ndarray
    k: np.ndarray
    per_layer_thickness_nm: float | None = None

    def index_on(self, grid: SpectralGrid) -> np.ndarray:
        """Complex index ``n - i*k`` linearly interpolated onto ``grid``."""
        w = grid.wavelengths_nm
        name = f"material {self.material_id!r}"
        return interp_on(w, self.wavelength_nm, self.n, name) - 1j * interp_on(w, self.wavelength_nm, self.k, name)


def read_dispersion(path: str | Path) -> DispersionTable:
    path = Path(path)
    data, meta = read_numeric_csv(path, ["wavelength_nm", "n", "k"])
    per_layer = None
    if "per_layer_thickness_nm" in meta:
        raw = meta["per_layer_thickness_nm"]
        try:
            per_layer = float(raw)
        except ValueError:
            raise DispersionParseError(f"{path}: bad per_layer_thickness_nm {raw!r}") from None
        if not per_layer > 0:
            raise DispersionParseError(f"{path}: per_layer_thickness_nm must be > 0")
    return DispersionTable(path.stem, data[:, 0], data[:, 1], data[:, 2], per_layer)


def load_dispersion(path: str | Path, grid: SpectralGrid) -> np.ndarray:
    return read_dispersion(path).index_on(grid)


def load_material(material_id: str, materials_dir: str | Path | None = None) -> DispersionTable:
    root = Path(materials_dir) if materials_dir is not None else assets.materials_dir()
    path = root / f"{material_id}.csv"
    if not path.exists():
        raise FileNotFoundError(f"no dispersion table for {material_id!r} at {path}")
    return read_dispersion(path)


def fresnel_interface(n_a: complex, n_b: complex) -> tuple[complex, complex]:
    """Normal-incidence amplitude coefficients going from medium a into b."""
    s = n_a + n_b
    if s == 0:
        raise SingularInterfaceError(f"n_a + n_b = 0 for n_a={n_a}, n_b={n_b}")
    return (n_a - n_b) / s, 2 * n_a / s


def propagation_matrix(n: complex, d_nm: float, lambda_nm: float) -> np.ndarray:
    if d_nm < 0 or lambda_nm <= 0:
        raise ValueError("need d_nm >= 0 and lambda_nm > 0")
    delta = 2 * np.pi * np.conj(n) * d_nm / lambda_nm
    return np.array([[np.exp(-1j * delta), 0], [0, np.exp(1j * delta)]], dtype=complex)


def interface_matrix(n_a, n_b) -> np.ndarray:
    """Batched interface matrices, shape (..., 2, 2)."""
    n_a = np.asarray(n_a, dtype=complex)
    n_b = np.asarray(n_b, dtype=complex)
    s = n_a + n_b
    if np.any(s == 0):
        raise SingularInterfaceError("n_a + n_b = 0 at some wavelength")
    r = (n_a - n_b) / s
    t = 2 * n_a / s
    m = np.empty(r.shape + (2, 2), dtype=complex)
    m[..., 0, 0] = 1
    m[..., 0, 1] = r
    m[..., 1, 0] = r
    m[..., 1, 1] = 1
    return m / t[..., None, None]


@dataclass(frozen=True)
class Layer:
    index: np.ndarray
    thickness_nm: float


@dataclass(frozen=True)
class LayerStack:
    grid: SpectralGrid
    injection_index: np.ndarray
    layers: tuple[Layer, ...]
    outcoupling_index: np.ndarray

    def __post_init__(self):
        d = self.grid.size
        for name in ("injection_index", "outcoupling_index"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=complex), (d,))
            object.__setattr__(self, name, arr)
        fixed = []
        for layer in self.layers:
            if not layer.thickness_nm > 0:
                raise ValueError(f"layer thickness must be > 0, got {layer.thickness_nm}")
            fixed.append(Layer(np.broadcast_to(np.asarray(layer.index, dtype=complex), (d,)), float(layer.thickness_nm)))
        object.__setattr__(self, "layers", tuple(fixed))

    @classmethod
    def build(cls, grid: SpectralGrid, injection, layers: Sequence[tuple], outcoupling) -> "LayerStack":
        return cls(grid, injection, tuple(Layer(n, d) for n, d in layers), outcoupling)


@dataclass(frozen=True)
class StackResponse:
    reflectance: np.ndarray
    transmittance: np.ndarray
    amplitude_r: np.ndarray
    amplitude_t: np.ndarray


def stack_response(stack: LayerStack) -> StackResponse:
    lam = stack.grid.wavelengths_nm
    media = [np.conj(stack.injection_index)]
    media += [np.conj(layer.index) for layer in stack.layers]
    media += [np.conj(stack.outcoupling_index)]
    m = interface_matrix(media[0], media[1])
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for i, layer in enumerate(stack.layers):
            delta = 2 * np.pi * media[i + 1] * layer.thickness_nm / lam
            p = np.zeros((lam.size, 2, 2), dtype=complex)
            p[:, 0, 0] = np.exp(-1j * delta)
            p[:, 1, 1] = np.exp(1j * delta)
            m = m @ p @ interface_matrix(media[i + 1], media[i + 2])
    m11 = m[:, 0, 0]
    if not np.all(np.isfinite(m)) or np.any(np.abs(m11) < 1e-300):
        raise DegenerateStackError("|M11| vanished; stack has no finite response")
    t = 1 / m11
    r = m[:, 1, 0] / m11
    refl = np.abs(r) ** 2
    trans = stack.outcoupling_index.real / stack.injection_index.real * np.abs(t) ** 2
    return StackResponse(refl, trans, r, t)


def substrate_layers(grid: SpectralGrid, materials_dir=None):
    """Index spectra for the oxide film and the silicon half-space."""
    sio2 = load_material("sio2", materials_dir).index_on(grid)
    si = load_material("si", materials_dir).index_on(grid)
    return sio2, si


def flake_stack(
    material: DispersionTable | None,
    layer_count: int,
    substrate_sio2_nm: float,
    grid: SpectralGrid,
    materials_dir=None,
) -> LayerStack:
    if layer_count < 0:
        raise ValueError("layer_count must be >= 0")
    sio2, si = substrate_layers(grid, materials_dir)
    layers = []
    if layer_count > 0:
        if material is None or material.per_layer_thickness_nm is None:
            name = material.material_id if material is not None else None
            raise ConfigurationError(f"material {name!r} has no per_layer_thickness_nm; cannot build a flake")
        layers.append(Layer(material.index_on(grid), layer_count * material.per_layer_thickness_nm))
    if substrate_sio2_nm > 0:
        layers.append(Layer(sio2, substrate_sio2_nm))
    return LayerStack(grid, np.ones(grid.size, dtype=complex), tuple(layers), si)


def flake_reflectance(
    material: DispersionTable | None,
    layer_count: int,
    substrate_sio2_nm: float,
    grid: SpectralGrid,
    materials_dir=None,
) -> np.ndarray:
    """Reflectance of air / flake / SiO2 / Si; ``layer_count=0`` is the bare substrate."""
    return stack_response(flake_stack(material, layer_count, substrate_sio2_nm, grid, materials_dir)).reflectance


@dataclass
class SpectrumCache:
    """Memoizes flake spectra per (material, layer_count, substrate) on one grid."""

    grid: SpectralGrid
    materials_dir: Path | None = None
    _tables: dict = field(default_factory=dict)
    _spectra: dict = field(default_factory=dict)

    def material(self, material_id: str) -> DispersionTable:
        if material_id not in self._tables:
            self._tables[material_id] = load_material(material_id, self.materials_dir)
        return self._tables[material_id]

    def reflectance(self, material_id: str | None, layer_count: int, substrate_sio2_nm: float) -> np.ndarray:
        if layer_count == 0:
            material_id = None
        key = (material_id, int(layer_count), float(substrate_sio2_nm))
        if key not in self._spectra:
            table = self.material(material_id) if material_id is not None else None
            spec = flake_reflectance(table, layer_count, substrate_sio2_nm, self.grid, self.materials_dir)
            spec.setflags(write=False)
            self._spectra[key] = spec
        return self._spectra[key]
