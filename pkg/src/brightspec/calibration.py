"""Per-pixel sensor response calibration from gray-filter stacks.

A calibration stack photographs the background through gray filters of
varying transparency while a fibre spectrometer records the spectrum
reaching the sensor for each filter. For every pixel this yields points
(M_j, S_j): the raw sensor value against the integral of the measured
spectrum weighted by the pixel's Bayer-channel quantum efficiency (the
weighting happens before integration). The piecewise-linear S(M) curve
then replaces raw values in subsequent frames, homogenizing the response
of all pixels.

Correction operates on the raw mosaic; no demosaicing happens here.
Mosaic frames can be folded to RGB superpixels afterwards if the
reconstruction is to consume RGB directly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractViolationError, ValidationError
from .spectral_model import RasterImage, simpson_weights

TABLE_MAGIC = b"BSCT"
BAYER_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
_LETTER_TO_CHANNEL = {"R": "red", "G": "green", "B": "blue"}


@dataclass(frozen=True)
class CalibrationPoint:
    m: float  # raw sensor value
    s: float  # QE-weighted spectrum integral

    def __post_init__(self):
        if self.m < 0 or self.s < 0:
            raise ContractViolationError("calibration points must be non-negative")


def bayer_channel_names(pattern: str) -> tuple[str, str, str, str]:
    if pattern not in BAYER_PATTERNS:
        raise ContractViolationError(f"unknown Bayer pattern {pattern!r}")
    return tuple(_LETTER_TO_CHANNEL[ch] for ch in pattern)


def bayer_channel_map(pattern: str, height: int, width: int) -> np.ndarray:
    """Channel name index (0=red, 1=green, 2=blue) for each mosaic pixel."""
    names = bayer_channel_names(pattern)
    order = ("red", "green", "blue")
    cell = np.array([[order.index(names[0]), order.index(names[1])],
                     [order.index(names[2]), order.index(names[3])]])
    reps = (height + 1) // 2, (width + 1) // 2
    return np.tile(cell, reps)[:height, :width]


def qe_weighted_integral(
    spectrum_wl: np.ndarray,
    spectrum: np.ndarray,
    qe_wl: np.ndarray,
    qe: np.ndarray,
    n_fine: int = 2001,
) -> float:
    """Integral of spectrum * QE on a fine Simpson grid over the spectrum support."""
    lo, hi = float(spectrum_wl.min()), float(spectrum_wl.max())
    fine = np.linspace(lo, hi, n_fine)
    vals = np.interp(fine, spectrum_wl, spectrum) * np.interp(fine, qe_wl, qe)
    return float(vals @ simpson_weights(n_fine, (hi - lo) / (n_fine - 1)))


class CalibrationTable:
    """Per-pixel piecewise-linear response curves keyed by Bayer channel."""

    def __init__(
        self,
        m: np.ndarray,  # (H, W, J), sorted ascending along J per pixel
        s: np.ndarray,  # (H, W, J)
        valid: np.ndarray,  # (H, W) bool
        bayer_pattern: str,
    ):
        m = np.asarray(m, dtype=float)
        s = np.asarray(s, dtype=float)
        valid = np.asarray(valid, dtype=bool)
        if m.ndim != 3 or m.shape != s.shape or m.shape[2] < 2:
            raise ContractViolationError("need matching (H, W, J>=2) point arrays")
        if valid.shape != m.shape[:2]:
            raise ContractViolationError("valid mask shape mismatch")
        if bayer_pattern not in BAYER_PATTERNS:
            raise ContractViolationError(f"unknown Bayer pattern {bayer_pattern!r}")
        self.m = m
        self.s = s
        self.valid = valid
        self.bayer_pattern = bayer_pattern

    @property
    def height(self) -> int:
        return self.m.shape[0]

    @property
    def width(self) -> int:
        return self.m.shape[1]

    @property
    def n_points(self) -> int:
        return self.m.shape[2]

    def points(self, r: int, c: int) -> list[CalibrationPoint]:
        return [CalibrationPoint(float(mv), float(sv)) for mv, sv in zip(self.m[r, c], self.s[r, c])]

    def save(self, path) -> None:
        header = {
            "format": "brightspec-calibration",
            "version": 1,
            "height": self.height,
            "width": self.width,
            "n_points": self.n_points,
            "bayer_pattern": self.bayer_pattern,
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(TABLE_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(self.m.astype("<f4").tobytes())
            f.write(self.s.astype("<f4").tobytes())
            f.write(self.valid.astype(np.uint8).tobytes())

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        with open(path, "rb") as f:
            if f.read(4) != TABLE_MAGIC:
                raise ValidationError(f"{path}: not a calibration table")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen))
            if header.get("version") != 1:
                raise ValidationError(f"{path}: unsupported table version")
            h, w, j = header["height"], header["width"], header["n_points"]
            m = np.frombuffer(f.read(h * w * j * 4), dtype="<f4").reshape(h, w, j)
            s = np.frombuffer(f.read(h * w * j * 4), dtype="<f4").reshape(h, w, j)
            valid = np.frombuffer(f.read(h * w), dtype=np.uint8).reshape(h, w).astype(bool)
        return cls(m.astype(float), s.astype(float), valid, header["bayer_pattern"])


def build_table(
    calib_frames,
    measured_spectra,
    qe_curves: tuple[np.ndarray, dict[str, np.ndarray]],
    bayer_pattern: str,
) -> CalibrationTable:
    """Construct per-pixel S(M) curves from a gray-filter calibration stack.

    calib_frames: one raw frame per gray filter; a frame may be a (H, W)
    array or a (T, H, W) temporal stack (averaged).
    measured_spectra: one (wavelengths, values) pair per frame.
    qe_curves: (wavelengths, {"red": ..., "green": ..., "blue": ...}).
    """
    if len(calib_frames) != len(measured_spectra):
        raise ContractViolationError("need one measured spectrum per calibration frame")
    if len(calib_frames) < 2:
        raise ContractViolationError("need at least two calibration frames")

    frames = []
    for f in calib_frames:
        f = np.asarray(f, dtype=float)
        if f.ndim == 3:
            f = f.mean(axis=0)
        if f.ndim != 2:
            raise ContractViolationError("calibration frames must be 2D (or stacks thereof)")
        frames.append(f)
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ContractViolationError("calibration frames must share dimensions")
    h, w = shape
    j = len(frames)

    qe_wl, qe_by_name = qe_curves
    for name in ("red", "green", "blue"):
        if name not in qe_by_name:
            raise ContractViolationError(f"QE curves must include {name!r}")

    # S depends only on (frame, channel): weight the spectrum by the
    # channel QE before integrating
    s_per_channel = np.empty((j, 3))
    for jj, (spec_wl, spec_vals) in enumerate(measured_spectra):
        for ci, name in enumerate(("red", "green", "blue")):
            s_per_channel[jj, ci] = qe_weighted_integral(
                np.asarray(spec_wl, dtype=float),
                np.asarray(spec_vals, dtype=float),
                qe_wl,
                qe_by_name[name],
            )

    chan = bayer_channel_map(bayer_pattern, h, w)
    m = np.stack(frames, axis=2)  # (H, W, J)
    s = s_per_channel[:, :].T[chan]  # (H, W, J) via channel index

    order = np.argsort(m, axis=2, kind="stable")
    m_sorted = np.take_along_axis(m, order, axis=2)
    s_sorted = np.take_along_axis(s, order, axis=2)

    strict_m = np.all(np.diff(m_sorted, axis=2) > 0, axis=2)
    mono_s = np.all(np.diff(s_sorted, axis=2) >= 0, axis=2)
    valid = strict_m & mono_s  # dead or saturating pixels drop out here
    return CalibrationTable(m_sorted, s_sorted, valid, bayer_pattern)


def correct_frame(raw: np.ndarray, table: CalibrationTable) -> RasterImage:
    """Replace raw values by interpolated S(M), rescaled by the global max S.

    Values outside a pixel's calibrated M range are linearly extrapolated
    from the nearest segment and the pixel is flagged in the mask.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (table.height, table.width):
        raise ContractViolationError(
            f"frame shape {raw.shape} does not match table {(table.height, table.width)}"
        )
    m, s = table.m, table.s
    j = table.n_points
    seg = np.sum(raw[:, :, None] >= m, axis=2) - 1
    seg = np.clip(seg, 0, j - 2)
    rows, cols = np.indices(raw.shape)
    m0 = m[rows, cols, seg]
    m1 = m[rows, cols, seg + 1]
    s0 = s[rows, cols, seg]
    s1 = s[rows, cols, seg + 1]
    slope = np.where(m1 > m0, (s1 - s0) / np.where(m1 > m0, m1 - m0, 1.0), 0.0)
    corrected = s0 + (raw - m0) * slope

    out_of_range = (raw < m[:, :, 0]) | (raw > m[:, :, -1])
    mask = table.valid & ~out_of_range

    s_max = float(s[table.valid].max()) if table.valid.any() else float(s.max())
    if s_max <= 0:
        raise ContractViolationError("calibration table has no positive response")
    corrected = np.maximum(corrected, 0.0) / s_max
    return RasterImage(intensities=corrected[:, :, None], mask=mask)


def mask_bright_pixels(image: RasterImage, percentile: float = 0.99) -> RasterImage:
    """Mask pixels brighter than the per-channel percentile, rescale the rest.

    Very bright pixels correspond to light-focusing structures and are
    treated as saturated; remaining intensities are rescaled per channel
    back to the original range.
    """
    if not (0.0 < percentile < 1.0):
        raise ContractViolationError("percentile must be inside (0, 1)")
    intens = image.intensities
    mask = image.mask.copy()
    over = np.zeros_like(mask)
    for c in range(image.n_channels):
        vals = intens[:, :, c][mask]
        if vals.size == 0:
            continue
        cut = np.quantile(vals, percentile)
        over |= mask & (intens[:, :, c] > cut)
    new_mask = mask & ~over

    out = intens.copy()
    for c in range(image.n_channels):
        before = intens[:, :, c][mask]
        after = intens[:, :, c][new_mask]
        if before.size and after.size and after.max() > 0:
            out[:, :, c] = intens[:, :, c] * (before.max() / after.max())
    out[~new_mask] = 0.0
    return RasterImage(intensities=out, mask=new_mask)


def mosaic_to_rgb(image: RasterImage, bayer_pattern: str) -> RasterImage:
    """Fold a corrected mosaic into RGB superpixels (2x2, greens averaged)."""
    if image.n_channels != 1:
        raise ContractViolationError("mosaic folding expects a single-channel frame")
    h, w = image.height - image.height % 2, image.width - image.width % 2
    vals = image.intensities[:h, :w, 0]
    mask = image.mask[:h, :w]
    chan = bayer_channel_map(bayer_pattern, h, w)
    out = np.zeros((h // 2, w // 2, 3))
    ok = np.ones((h // 2, w // 2), dtype=bool)
    for c in range(3):
        sel = chan == c
        weight = (sel & mask).astype(float).reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3))
        total = np.where(sel & mask, vals, 0.0).reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3))
        ok &= weight > 0
        out[:, :, c] = np.where(weight > 0, total / np.maximum(weight, 1.0), 0.0)
    return RasterImage(intensities=out, mask=ok)


def save_raw_frame_png(path, frame: np.ndarray) -> None:
    """Write a raw frame as 16-bit grayscale PNG."""
    arr = np.asarray(frame)
    if arr.ndim != 2:
        raise ContractViolationError("raw frames are 2D")
    if arr.dtype != np.uint16:
        if arr.min() < 0 or arr.max() > 65535:
            raise ContractViolationError("raw values must fit in 16 bits")
        arr = np.round(arr).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)


def load_raw_frame(path, sidecar: dict | None = None) -> tuple[np.ndarray, dict]:
    """Load a raw frame from 16-bit PNG or flat little-endian u16 binary.

    Binary frames need a JSON sidecar (same stem, .json suffix) with
    height, width, bit_depth and bayer_pattern; for PNGs the sidecar is
    optional and only supplies metadata.
    """
    path = str(path)
    if path.lower().endswith(".png"):
        img = Image.open(path)
        arr = np.asarray(img, dtype=np.uint16)
        meta = dict(sidecar or {})
        meta.setdefault("height", arr.shape[0])
        meta.setdefault("width", arr.shape[1])
        meta.setdefault("bit_depth", 16)
        return arr, meta
    if sidecar is None:
        sidecar_path = path.rsplit(".", 1)[0] + ".json"
        try:
            with open(sidecar_path) as f:
                sidecar = json.load(f)
        except FileNotFoundError:
            raise ValidationError(f"{path}: binary raw frame needs a JSON sidecar") from None
    for key in ("height", "width"):
        if key not in sidecar:
            raise ValidationError(f"{path}: sidecar misses {key!r}")
    h, w = int(sidecar["height"]), int(sidecar["width"])
    data = np.fromfile(path, dtype="<u2")
    if data.size != h * w:
        raise ValidationError(f"{path}: expected {h*w} u16 values, found {data.size}")
    return data.reshape(h, w), dict(sidecar)
