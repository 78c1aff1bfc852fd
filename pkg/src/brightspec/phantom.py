"""Synthetic scenes with known ground truth for end-to-end validation.

A phantom is a label map partitioning the raster into regions, one smooth
prototype spectrum per region, optional per-pixel spectral jitter and
sensor noise, and optional "micro-lens" pixels whose intensity is pushed
above the white level (no transparency bounded by 1 can explain them).
Scenes render through the same forward model the reconstruction inverts,
so a noiseless phantom round-trips exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError
from .reconstruction import SpectralCube, data_fit_cost
from .spectral_model import (
    EffectiveLight,
    RasterImage,
    WavelengthGrid,
    forward_matrix,
)


@dataclass
class PhantomScene:
    """Description of a synthetic scene."""

    height: int = 64
    width: int = 64
    n_regions: int = 5
    layout: str = "blocks"  # blocks | stripes | voronoi
    spectrum_noise_std: float = 0.0  # per-pixel jitter around the region prototype
    sensor_noise_std: float = 0.0
    microlens: list[tuple[int, int, float]] = field(default_factory=list)  # (row, col, factor)
    prototypes: np.ndarray | None = None  # (n_regions, w); generated when None

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ContractViolationError("scene must have positive dimensions")
        if self.n_regions < 1:
            raise ContractViolationError("need at least one region")
        if self.layout not in ("blocks", "stripes", "voronoi"):
            raise ContractViolationError(f"unknown layout {self.layout!r}")
        for r, c, f in self.microlens:
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise ContractViolationError(f"micro-lens pixel ({r}, {c}) outside the raster")
            if f <= 1.0:
                raise ContractViolationError("micro-lens factor must exceed 1")

    def to_json(self) -> str:
        d = {
            "height": self.height,
            "width": self.width,
            "n_regions": self.n_regions,
            "layout": self.layout,
            "spectrum_noise_std": self.spectrum_noise_std,
            "sensor_noise_std": self.sensor_noise_std,
            "microlens": [[r, c, f] for r, c, f in self.microlens],
        }
        if self.prototypes is not None:
            d["prototypes"] = np.asarray(self.prototypes).tolist()
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomScene":
        d = json.loads(text)
        protos = d.get("prototypes")
        return cls(
            height=int(d.get("height", 64)),
            width=int(d.get("width", 64)),
            n_regions=int(d.get("n_regions", 5)),
            layout=d.get("layout", "blocks"),
            spectrum_noise_std=float(d.get("spectrum_noise_std", 0.0)),
            sensor_noise_std=float(d.get("sensor_noise_std", 0.0)),
            microlens=[(int(r), int(c), float(f)) for r, c, f in d.get("microlens", [])],
            prototypes=None if protos is None else np.asarray(protos, dtype=float),
        )


def smooth_prototypes(n: int, grid: WavelengthGrid, rng: np.random.Generator) -> np.ndarray:
    """Prototype spectra: heavily smoothed random walks clamped to [0, 1].

    Strong smoothing keeps the prototypes low-frequency and the swing
    around the base transparency stays modest; that is the regime where a
    trichromatic measurement plus the flat prior of the solver determines
    most of the spectrum's energy, so recovery is meaningful despite the
    w >> C underdetermination.
    """
    w = grid.w
    kernel_sigma = w / 6.0
    x = np.arange(-w, w + 1)
    kernel = np.exp(-0.5 * (x / kernel_sigma) ** 2)
    kernel /= kernel.sum()
    protos = np.empty((n, w))
    for i in range(n):
        walk = np.cumsum(rng.standard_normal(w))
        padded = np.pad(walk, w, mode="edge")
        smooth = np.convolve(padded, kernel, mode="same")[w : 2 * w]
        span = smooth.max() - smooth.min()
        if span < 1e-9:
            smooth = np.zeros(w)
            span = 1.0
        amp = rng.uniform(0.10, 0.18)
        base = rng.uniform(0.35, 0.65)
        protos[i] = np.clip(base + amp * (smooth - smooth.mean()) / span * 2.0, 0.02, 0.98)
    return protos


def region_labels(scene: PhantomScene, rng: np.random.Generator) -> np.ndarray:
    h, w, n = scene.height, scene.width, scene.n_regions
    if scene.layout == "stripes":
        edges = np.linspace(0, w, n + 1).astype(int)
        labels = np.zeros((h, w), dtype=int)
        for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
            labels[:, a:b] = i
        return labels
    if scene.layout == "voronoi":
        seeds_r = rng.uniform(0, h, n)
        seeds_c = rng.uniform(0, w, n)
        rr, cc = np.mgrid[0:h, 0:w]
        d2 = (rr[:, :, None] - seeds_r) ** 2 + (cc[:, :, None] - seeds_c) ** 2
        return np.argmin(d2, axis=2)
    # blocks: near-square tiling with n cells
    cols = max(1, int(math.ceil(math.sqrt(n))))
    rows = int(math.ceil(n / cols))
    r_edges = np.linspace(0, h, rows + 1).astype(int)
    c_edges = np.linspace(0, w, cols + 1).astype(int)
    labels = np.zeros((h, w), dtype=int)
    k = 0
    for i in range(rows):
        for j in range(cols):
            labels[r_edges[i] : r_edges[i + 1], c_edges[j] : c_edges[j + 1]] = min(k, n - 1)
            k += 1
    return labels


def generate_scene(
    scene: PhantomScene,
    light: EffectiveLight,
    grid: WavelengthGrid,
    seed: int = 0,
) -> tuple[SpectralCube, RasterImage, np.ndarray]:
    """Render a phantom scene through the forward model.

    Returns the ground-truth cube, the observed image, and the label map.
    Deterministic for a given seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    labels = region_labels(scene, rng)
    protos = scene.prototypes
    if protos is None:
        protos = smooth_prototypes(scene.n_regions, grid, rng)
    protos = np.asarray(protos, dtype=float)
    if protos.shape != (scene.n_regions, grid.w):
        raise ContractViolationError(
            f"prototypes must be ({scene.n_regions}, {grid.w}), got {protos.shape}"
        )

    spectra = protos[labels]
    if scene.spectrum_noise_std > 0:
        spectra = spectra + rng.normal(0.0, scene.spectrum_noise_std, spectra.shape)
    spectra = np.clip(spectra, 0.0, 1.0)

    a_mat = forward_matrix(light, grid)
    intens = np.einsum("hwk,ck->hwc", spectra, a_mat)
    if scene.sensor_noise_std > 0:
        intens = np.clip(intens + rng.normal(0.0, scene.sensor_noise_std, intens.shape), 0.0, 1.0)
    for r, c, f in scene.microlens:
        # light-condensing pixel: observed intensity above the white level
        intens[r, c, :] = f

    truth = SpectralCube(
        spectra=spectra,
        cost=np.zeros((scene.height, scene.width)),
        mask=np.ones((scene.height, scene.width), dtype=bool),
        grid=grid,
    )
    image = RasterImage(intensities=intens)
    return truth, image, labels


@dataclass
class ScoreReport:
    median_cosine: float
    p05_cosine: float
    n_compared: int
    residual_ok_fraction: float | None = None  # all channels below 1e-2
    residual_mean: float | None = None
    residual_max: float | None = None
    mask_precision: float | None = None
    mask_recall: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {k: v for k, v in self.__dict__.items()}, sort_keys=True, indent=2, default=float
        )


def cosine_similarity_map(truth: SpectralCube, estimate: SpectralCube) -> np.ndarray:
    """Per-pixel cosine similarity, NaN where either cube is masked."""
    if truth.spectra.shape != estimate.spectra.shape:
        raise ContractViolationError("cube dimensions differ")
    num = np.einsum("hwk,hwk->hw", truth.spectra, estimate.spectra)
    den = np.linalg.norm(truth.spectra, axis=2) * np.linalg.norm(estimate.spectra, axis=2)
    sim = np.full(num.shape, np.nan)
    ok = truth.mask & estimate.mask & (den > 1e-300)
    sim[ok] = num[ok] / den[ok]
    return sim


def score_reconstruction(
    truth: SpectralCube,
    estimate: SpectralCube,
    *,
    image: RasterImage | None = None,
    light: EffectiveLight | None = None,
    microlens: list[tuple[int, int, float]] | None = None,
    residual_target: float = 1e-2,
) -> ScoreReport:
    """Compare an estimate against ground truth.

    Cosine similarity is magnitude blind, matching how the recovered
    quasi-spectra are meant to be used. When the observed image and light
    are supplied, forward residuals are reported as well; when the
    injected micro-lens list is supplied, precision/recall of the pixels
    newly masked by the reconstruction is reported.
    """
    sim = cosine_similarity_map(truth, estimate)
    vals = sim[np.isfinite(sim)]
    if vals.size == 0:
        raise ContractViolationError("no jointly unmasked pixels to compare")
    report = ScoreReport(
        median_cosine=float(np.median(vals)),
        p05_cosine=float(np.quantile(vals, 0.05)),
        n_compared=int(vals.size),
    )

    if image is not None and light is not None:
        a_mat = forward_matrix(light, estimate.grid)
        pred = np.einsum("hwk,ck->hwc", estimate.spectra, a_mat)
        resid = np.abs(pred - image.intensities)
        ok = estimate.mask & image.mask
        report.residual_mean = float(resid[ok].mean())
        report.residual_max = float(resid[ok].max())
        report.residual_ok_fraction = float((resid[ok] < residual_target).all(axis=-1).mean())

    if microlens is not None:
        injected = np.zeros(truth.mask.shape, dtype=bool)
        for r, c, _ in microlens:
            injected[r, c] = True
        flagged = truth.mask & ~estimate.mask
        tp = float(np.sum(flagged & injected))
        report.mask_precision = tp / max(1.0, float(flagged.sum()))
        report.mask_recall = tp / max(1.0, float(injected.sum()))
    return report
