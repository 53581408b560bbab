"""Reader for the small numeric CSV assets (dispersion, CMF, illuminant)."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np


class TableParseError(ValueError):
    pass


class TableRangeError(ValueError):
    pass


def read_numeric_csv(path: str | Path, columns: list[str]) -> tuple[np.ndarray, dict[str, str]]:
    """Parse ``path`` into an (rows, len(columns)) float array.

    Lines starting with ``#`` hold ``key=value`` metadata. The first column
    must be strictly increasing; all values finite and non-negative.
    """
    path = Path(path)
    meta: dict[str, str] = {}
    rows: list[tuple[float, ...]] = []
    header_seen = False
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                key, sep, value = text[1:].partition("=")
                if sep:
                    meta[key.strip()] = value.strip()
                continue
            cells = [c.strip() for c in next(csv.reader([text]))]
            if not header_seen:
                if cells != columns:
                    raise TableParseError(f"{path}:{lineno}: expected header {','.join(columns)!r}")
                header_seen = True
                continue
            if len(cells) != len(columns):
                raise TableParseError(f"{path}:{lineno}: expected {len(columns)} columns, got {len(cells)}")
            try:
                values = tuple(float(c) for c in cells)
            except ValueError:
                raise TableParseError(f"{path}:{lineno}: non-numeric value in {text!r}") from None
            if not all(math.isfinite(v) and v >= 0 for v in values):
                raise TableParseError(f"{path}:{lineno}: values must be finite and >= 0")
            if rows and values[0] <= rows[-1][0]:
                raise TableParseError(f"{path}:{lineno}: first column must be strictly increasing")
            rows.append(values)
    if not header_seen:
        raise TableParseError(f"{path}: missing header")
    if not rows:
        raise TableParseError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64), meta


def interp_on(x_new: np.ndarray, x: np.ndarray, y: np.ndarray, name: str) -> np.ndarray:
    """Linear interpolation that refuses to extrapolate."""
    if x_new[0] < x[0] or x_new[-1] > x[-1]:
        raise TableRangeError(f"{name}: grid [{x_new[0]}, {x_new[-1]}] nm outside table range [{x[0]}, {x[-1]}] nm")
    return np.interp(x_new, x, y)
