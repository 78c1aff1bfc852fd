"""Wavelength grid, spectra and the linear forward measurement model.

A transparency spectrum T(lambda) lives on a fixed uniform wavelength grid.
The camera sees per-channel intensities

    I_c = integral( L_c(lambda) * T(lambda) ) dlambda,

where L_c is the effective incoming light of channel c (source spectrum
times channel quantum efficiency). Integrals are evaluated with composite
Simpson quadrature on the grid; predictions and observed intensities are
normalized by the per-channel white level (the integral of L_c alone) so
that a fully transparent medium maps to intensity 1.0 in every channel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, DegenerateLightError

DEFAULT_LAMBDA_MIN = 450.0  # nm, UV long-pass cutoff of the assumed optical path
DEFAULT_LAMBDA_MAX = 775.0  # nm, IR short-pass cutoff
DEFAULT_N_SAMPLES = 48


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


def simpson_weights(n: int, h: float) -> np.ndarray:
    """Quadrature weight vector for n uniformly spaced samples with step h.

    For an even number of intervals this is plain composite Simpson. For an
    odd number of intervals (e.g. the default 48 samples / 47 intervals) the
    first n-4 intervals use composite Simpson and the last three use the
    Simpson 3/8 rule, which keeps the rule exact for cubics.
    """
    if n < 3:
        raise ContractViolationError(f"need at least 3 samples, got {n}")
    intervals = n - 1
    w = np.zeros(n, dtype=float)
    if intervals % 2 == 0:
        w[0] = w[-1] = 1.0
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= h / 3.0
    elif intervals == 3:
        w[:] = np.array([1.0, 3.0, 3.0, 1.0]) * (3.0 * h / 8.0)
    else:
        head = simpson_weights(n - 3, h)
        w[: n - 3] += head
        w[n - 4 :] += np.array([1.0, 3.0, 3.0, 1.0]) * (3.0 * h / 8.0)
    return w


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform wavelength grid over [lambda_min, lambda_max] with w samples."""

    lambda_min: float = DEFAULT_LAMBDA_MIN
    lambda_max: float = DEFAULT_LAMBDA_MAX
    w: int = DEFAULT_N_SAMPLES
    samples: np.ndarray = field(init=False, repr=False, compare=False)
    simpson: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.w < 3:
            raise ContractViolationError(f"grid needs w >= 3 samples, got {self.w}")
        if not self.lambda_min < self.lambda_max:
            raise ContractViolationError(
                f"need lambda_min < lambda_max, got [{self.lambda_min}, {self.lambda_max}]"
            )
        samples = np.linspace(self.lambda_min, self.lambda_max, self.w)
        object.__setattr__(self, "samples", _readonly(samples))
        object.__setattr__(self, "simpson", _readonly(simpson_weights(self.w, self.step)))

    @property
    def step(self) -> float:
        return (self.lambda_max - self.lambda_min) / (self.w - 1)

    def to_dict(self) -> dict:
        return {"lambda_min": self.lambda_min, "lambda_max": self.lambda_max, "w": self.w}

    @classmethod
    def from_dict(cls, d: dict) -> "WavelengthGrid":
        return cls(lambda_min=float(d["lambda_min"]), lambda_max=float(d["lambda_max"]), w=int(d["w"]))


def simpson_integrate(values: np.ndarray, grid: WavelengthGrid) -> float:
    """Composite-Simpson integral of sampled values over the grid span."""
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.w,):
        raise ContractViolationError(
            f"values must have length {grid.w}, got shape {values.shape}"
        )
    return float(values @ grid.simpson)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Transparency samples on a grid, each in [0, 1]."""

    values: np.ndarray
    grid: WavelengthGrid

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.w,):
            raise ContractViolationError(
                f"spectrum must have {self.grid.w} samples, got shape {values.shape}"
            )
        if np.any(values < -1e-12) or np.any(values > 1.0 + 1e-12):
            raise ContractViolationError("spectrum values must lie in [0, 1]")
        object.__setattr__(self, "values", _readonly(np.clip(values, 0.0, 1.0)))


@dataclass(frozen=True, eq=False)
class EffectiveLight:
    """Per-channel effective incoming light L_c on the grid."""

    channels: np.ndarray  # (C, w), non-negative
    grid: WavelengthGrid
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        ch = np.atleast_2d(np.asarray(self.channels, dtype=float))
        if ch.ndim != 2 or ch.shape[1] != self.grid.w:
            raise ContractViolationError(
                f"channels must be (C, {self.grid.w}), got shape {ch.shape}"
            )
        if ch.shape[0] < 1:
            raise ContractViolationError("need at least one channel")
        if np.any(ch < 0):
            raise ContractViolationError("effective light must be non-negative")
        if np.any(ch.max(axis=1) <= 0):
            raise ContractViolationError("every channel needs a strictly positive value")
        names = tuple(self.channel_names) or tuple(f"ch{i}" for i in range(ch.shape[0]))
        if len(names) != ch.shape[0]:
            raise ContractViolationError("channel_names length must match channel count")
        object.__setattr__(self, "channels", _readonly(ch))
        object.__setattr__(self, "channel_names", names)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @classmethod
    def from_curves(
        cls,
        wavelengths: np.ndarray,
        curves: dict[str, np.ndarray],
        grid: WavelengthGrid,
    ) -> "EffectiveLight":
        """Linearly resample named curves onto the grid."""
        names = tuple(curves.keys())
        ch = np.stack([np.interp(grid.samples, wavelengths, curves[n]) for n in names])
        return cls(channels=ch, grid=grid, channel_names=names)

    @classmethod
    def from_source_and_qe(
        cls,
        source_wl: np.ndarray,
        source: np.ndarray,
        qe_wl: np.ndarray,
        qe_curves: dict[str, np.ndarray],
        grid: WavelengthGrid,
    ) -> "EffectiveLight":
        """Build L_c = S(lambda) * F_c(lambda) from a source and QE curves."""
        s = np.interp(grid.samples, source_wl, source)
        names = tuple(qe_curves.keys())
        ch = np.stack([s * np.interp(grid.samples, qe_wl, qe_curves[n]) for n in names])
        return cls(channels=ch, grid=grid, channel_names=names)


@dataclass
class RasterImage:
    """Calibrated H x W x C intensity raster with a validity mask.

    Unmasked intensities are nominally in [0, 1] after white normalization;
    light-condensing pixels may legitimately exceed 1 and are caught later
    by masking stages, so the upper bound is not enforced here.
    """

    intensities: np.ndarray  # (H, W, C)
    mask: np.ndarray | None = None  # (H, W) bool, True = participates

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ContractViolationError(f"intensities must be HxWxC, got shape {arr.shape}")
        if np.any(arr < -1e-12):
            raise ContractViolationError("intensities must be non-negative")
        self.intensities = np.ascontiguousarray(np.maximum(arr, 0.0))
        if self.mask is None:
            self.mask = np.ones(arr.shape[:2], dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != arr.shape[:2]:
                raise ContractViolationError(
                    f"mask shape {self.mask.shape} does not match image {arr.shape[:2]}"
                )

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def n_channels(self) -> int:
        return self.intensities.shape[2]

    def save_npz(self, path) -> None:
        np.savez_compressed(path, intensities=self.intensities, mask=self.mask)

    @classmethod
    def load_npz(cls, path) -> "RasterImage":
        data = np.load(path)
        return cls(intensities=data["intensities"], mask=data["mask"])


def normalize_white(light: EffectiveLight, grid: WavelengthGrid) -> np.ndarray:
    """Per-channel integral of L_c; the white level used for normalization."""
    if light.grid != grid:
        raise ContractViolationError("light and grid do not match")
    white = light.channels @ grid.simpson
    if np.any(white <= 0):
        raise DegenerateLightError("a channel of the effective light integrates to zero")
    return white


def forward_matrix(light: EffectiveLight, grid: WavelengthGrid) -> np.ndarray:
    """(C, w) matrix A such that A @ T gives the normalized channel predictions."""
    white = normalize_white(light, grid)
    return (light.channels * grid.simpson[None, :]) / white[:, None]


def forward_predict(spectrum: Spectrum, light: EffectiveLight, grid: WavelengthGrid) -> np.ndarray:
    """Normalized per-channel intensities predicted for a transparency spectrum."""
    if spectrum.grid != grid or light.grid != grid:
        raise ContractViolationError("spectrum, light and grid must share the same grid")
    return forward_matrix(light, grid) @ spectrum.values


def load_curve_csv(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Read a curve table: header row, col 1 wavelength (nm), later cols values."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if len(header) < 2:
        raise ContractViolationError(f"{path}: need a wavelength column plus at least one value column")
    data = np.asarray(rows, dtype=float)
    order = np.argsort(data[:, 0])
    data = data[order]
    wl = data[:, 0]
    return wl, {name: data[:, i + 1] for i, name in enumerate(header[1:])}
