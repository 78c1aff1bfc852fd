"""Bundled curve assets: CIE 1931 observer, default QE and source spectra."""

from __future__ import annotations

from importlib import resources

import numpy as np

from .spectral_model import EffectiveLight, WavelengthGrid, load_curve_csv


def _asset_path(name: str):
    return resources.files("brightspec.data").joinpath(name)


def load_asset_curves(name: str) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    with resources.as_file(_asset_path(name)) as p:
        return load_curve_csv(p)


def cie_1931_curves() -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """CIE 1931 2-degree observer color matching functions, 380-780 nm."""
    return load_asset_curves("cie_1931_2deg.csv")


def default_qe_curves() -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Vendor-style RGB quantum efficiency curves for the synthetic camera."""
    return load_asset_curves("default_qe_rgb.csv")


def default_source_curve() -> tuple[np.ndarray, np.ndarray]:
    wl, curves = load_asset_curves("default_source.csv")
    return wl, curves["intensity"]


def default_effective_light(grid: WavelengthGrid) -> EffectiveLight:
    """Bundled effective light (LED source times RGB QE) resampled to the grid."""
    wl, curves = load_asset_curves("default_effective_light.csv")
    return EffectiveLight.from_curves(wl, curves, grid)
