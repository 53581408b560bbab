"""Locations of bundled data files (dispersion tables, CMFs, illuminants).

``FLAKEADAPT_ASSETS`` overrides the root; it must mirror the layout of the
bundled ``data/`` directory.
"""

from __future__ import annotations

import os
from pathlib import Path

ENV_VAR = "FLAKEADAPT_ASSETS"
_BUNDLED = Path(__file__).resolve().parent / "data"
_root_override: Path | None = None


def set_root(path) -> None:
    """Process-wide asset root taking precedence over the environment; None resets."""
    global _root_override
    _root_override = Path(path) if path is not None else None


def root() -> Path:
    if _root_override is not None:
        return _root_override
    override = os.environ.get(ENV_VAR)
    return Path(override) if override else _BUNDLED


def materials_dir() -> Path:
    return root() / "materials"


def cmf_path() -> Path:
    return root() / "cie1931_2deg.csv"


def illuminant_path(illuminant_id: str) -> Path:
    return root() / "illuminants" / f"{illuminant_id.lower()}.csv"
