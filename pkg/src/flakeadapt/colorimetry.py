"""Sensor/illuminant model and spectral-to-RGB rendering.

Spectral images are arrays of shape ``(..., D)`` and RGB images arrays of
shape ``(..., 3)``, both in linear light. Gamma encoding happens only in
:func:`save_png`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import assets
from .optics import SpectralGrid
from .tabular import interp_on, read_numeric_csv

# IEC 61966-2-1 XYZ (D65, Y=1) to linear sRGB
XYZ_TO_SRGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)


class ColorimetryError(ValueError):
    pass


@dataclass(frozen=True)
class SensorModel:
    grid: SpectralGrid
    S: np.ndarray
    I: np.ndarray
    illuminant_id: str = "custom"

    def __post_init__(self):
        d = self.grid.size
        S = np.asarray(self.S, dtype=np.float64)
        I = np.asarray(self.I, dtype=np.float64)
        if S.shape != (d, 3) or I.shape != (d,):
            raise ColorimetryError(f"S must be ({d}, 3) and I ({d},), got {S.shape} and {I.shape}")
        if np.any(S < 0) or np.any(I < 0):
            raise ColorimetryError("sensitivities and illuminant must be non-negative")
        norm = float(S[:, 1] @ I)
        if not norm > 0:
            raise ColorimetryError("degenerate illuminant: white normalization is zero")
        A = S.T * I[None, :]
        for arr in (S, I, A):
            arr.setflags(write=False)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "I", I)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "norm", norm)
        # full linear map spectrum -> linear sRGB
        M = XYZ_TO_SRGB @ A / norm
        M.setflags(write=False)
        object.__setattr__(self, "rgb_matrix", M)

    def with_illuminant(self, I: np.ndarray, illuminant_id: str) -> "SensorModel":
        return SensorModel(self.grid, self.S, I, illuminant_id)


def read_cmf(path: str | Path, grid: SpectralGrid) -> np.ndarray:
    data, _ = read_numeric_csv(path, ["wavelength_nm", "xbar", "ybar", "zbar"])
    w = grid.wavelengths_nm
    name = f"CMF table {Path(path).name}"
    return np.stack([interp_on(w, data[:, 0], data[:, j], name) for j in (1, 2, 3)], axis=1)


def read_illuminant(path: str | Path, grid: SpectralGrid) -> np.ndarray:
    data, _ = read_numeric_csv(path, ["wavelength_nm", "power"])
    return interp_on(grid.wavelengths_nm, data[:, 0], data[:, 1], f"illuminant {Path(path).name}")


def build_sensor_model(cmf_path: str | Path, illuminant_path: str | Path, grid: SpectralGrid) -> SensorModel:
    S = read_cmf(cmf_path, grid)
    I = read_illuminant(illuminant_path, grid)
    return SensorModel(grid, S, I, Path(illuminant_path).stem)


def default_sensor(grid: SpectralGrid, illuminant_id: str = "d65") -> SensorModel:
    """CIE 1931 observer under a bundled illuminant."""
    return build_sensor_model(assets.cmf_path(), assets.illuminant_path(illuminant_id), grid)


def render(spectral: np.ndarray, sensor: SensorModel) -> np.ndarray:
    R = np.asarray(spectral)
    if R.shape[-1] != sensor.grid.size:
        raise ColorimetryError(f"spectral image has {R.shape[-1]} bands, sensor grid has {sensor.grid.size}")
    return R @ sensor.rgb_matrix.T


def xyz(spectral: np.ndarray, sensor: SensorModel) -> np.ndarray:
    return np.asarray(spectral) @ (sensor.A.T / sensor.norm)


def apply_domain(x: np.ndarray, G) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (3,) or not np.all(G > 0):
        raise ColorimetryError(f"white-balance gains must be 3 positive values, got {G!r}")
    return np.asarray(x) * G


def srgb_encode(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def save_png(path: str | Path, x: np.ndarray) -> None:
    from PIL import Image

    arr = np.round(srgb_encode(np.asarray(x, dtype=np.float64)) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# Float image file: 4-byte magic, H, W, C as little-endian uint32, then
# row-major little-endian floats. FIMG = float32, FIM8 = float64.
_MAGIC = {b"FIMG": "<f4", b"FIM8": "<f8"}


def save_float_image(path: str | Path, x: np.ndarray, double: bool = False) -> None:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ColorimetryError(f"float image must be H x W x C, got shape {x.shape}")
    magic = b"FIM8" if double else b"FIMG"
    h, w, c = x.shape
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(x, dtype=_MAGIC[magic]).tobytes())


def load_float_image(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic = raw[:4]
    if magic not in _MAGIC or len(raw) < 16:
        raise ColorimetryError(f"{path}: not a float image")
    h, w, c = struct.unpack("<III", raw[4:16])
    dtype = np.dtype(_MAGIC[magic])
    if len(raw) != 16 + h * w * c * dtype.itemsize:
        raise ColorimetryError(f"{path}: truncated float image")
    return np.frombuffer(raw, dtype=dtype, offset=16).reshape(h, w, c).astype(np.float64)
