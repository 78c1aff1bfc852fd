"""Quasi-transparency spectra from bright-field microscopy images."""

__version__ = "0.1.0"

from .spectral_model import (  # noqa: F401
    EffectiveLight,
    RasterImage,
    Spectrum,
    WavelengthGrid,
    forward_predict,
    normalize_white,
    simpson_integrate,
)
