"""Per-pixel spectral reconstruction by regularized inverse modeling.

Each pixel m minimizes

    F_m = sum_c exp(|pred_c(T_m) - I_mc|) - C
          + (1/N) * sum_{n in neighbors} G_mn * sum_i (T_m_i - T_n_i)^2

over T_m in [0,1]^w with CMA-ES. The smoothness part couples pixels, so
the scheme iterates: neighbor spectra are frozen at the previous
iteration's values (mean-field), every unmasked pixel is solved
independently to a scheduled tolerance, and gradients/edges feeding the
G_mn weights are recomputed from the current guess. Iteration stops when
the relative change of the image-mean cost drops below `stop_change` or
the iteration cap is reached.

Pixels whose final data-fit cost is abnormally high cannot satisfy the
forward model with any T <= 1 (light-condensing objects); they are masked
out of the result.

Per-pixel solves are deterministic: every (iteration, pixel) pair derives
its own RNG stream from the base seed, so results do not depend on how
work is distributed over processes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import multiprocessing

import numpy as np

from .cmaes import CmaesConfig, cma_es_minimize
from .continuity import (
    DEFAULT_CANNY_HIGH,
    DEFAULT_CANNY_LOW,
    DEFAULT_SIGMA,
    DEFAULT_T_B,
    DEFAULT_T_ED,
    GradientField,
    NeighborGraph,
    coupling_maps,
)
from .errors import ContractViolationError, EmptyInputError, ValidationError
from .spectral_model import (
    EffectiveLight,
    RasterImage,
    Spectrum,
    WavelengthGrid,
    forward_matrix,
)

CUBE_MAGIC = b"BSPC"
DEFAULT_OUTLIER_FACTOR = 10.0
# The quadratic neighbor coupling makes each per-pixel solve a short
# proximal step, so the search must start narrow; wide initial steps are
# rejected wholesale and the optimizer stalls at its warm start.
RECONSTRUCTION_SIGMA0 = 0.01
# data-fit cost of a ~0.1 per-channel residual; the outlier threshold never
# drops below this even when the median cost is essentially zero
def _outlier_floor(n_channels: int) -> float:
    return n_channels * (math.exp(0.1) - 1.0)


@dataclass
class Schedule:
    """Outer-iteration schedule: linear tolerance decrease, then constant."""

    it_max: int = 40
    tol_start: float = 0.05
    tol_end: float = 0.005
    tol_floor_iteration: int = 10
    stop_change: float = 0.01

    def __post_init__(self):
        if not (self.tol_start >= self.tol_end > 0):
            raise ContractViolationError("need tol_start >= tol_end > 0")
        if not (1 <= self.tol_floor_iteration <= self.it_max):
            raise ContractViolationError("need 1 <= tol_floor_iteration <= it_max")
        if self.stop_change <= 0:
            raise ContractViolationError("stop_change must be positive")

    def tolerance(self, iteration: int) -> float:
        if iteration >= self.tol_floor_iteration or self.tol_floor_iteration == 1:
            return self.tol_end
        frac = (iteration - 1) / (self.tol_floor_iteration - 1)
        return self.tol_start + (self.tol_end - self.tol_start) * frac

    def to_dict(self) -> dict:
        return {
            "it_max": self.it_max,
            "tol_start": self.tol_start,
            "tol_end": self.tol_end,
            "tol_floor_iteration": self.tol_floor_iteration,
            "stop_change": self.stop_change,
        }


@dataclass
class SpectralCube:
    """H x W grid of spectra plus per-pixel cost and validity mask."""

    spectra: np.ndarray  # (H, W, w)
    cost: np.ndarray  # (H, W)
    mask: np.ndarray  # (H, W) bool
    grid: WavelengthGrid
    iteration: int = 0
    converged: bool = False

    def __post_init__(self):
        self.spectra = np.asarray(self.spectra, dtype=float)
        self.cost = np.asarray(self.cost, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.spectra.ndim != 3 or self.spectra.shape[2] != self.grid.w:
            raise ContractViolationError(
                f"spectra must be (H, W, {self.grid.w}), got {self.spectra.shape}"
            )
        if self.cost.shape != self.spectra.shape[:2] or self.mask.shape != self.cost.shape:
            raise ContractViolationError("cost/mask shapes must match the spectra raster")

    @property
    def height(self) -> int:
        return self.spectra.shape[0]

    @property
    def width(self) -> int:
        return self.spectra.shape[1]

    def spectrum_at(self, r: int, c: int) -> Spectrum:
        return Spectrum(self.spectra[r, c], self.grid)

    def save(self, path) -> None:
        header = {
            "format": "brightspec-cube",
            "version": 1,
            "height": self.height,
            "width": self.width,
            "iteration": int(self.iteration),
            "converged": bool(self.converged),
            **self.grid.to_dict(),
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(CUBE_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(self.spectra.astype("<f4").tobytes())
            f.write(self.mask.astype(np.uint8).tobytes())
            f.write(self.cost.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "SpectralCube":
        with open(path, "rb") as f:
            if f.read(4) != CUBE_MAGIC:
                raise ValidationError(f"{path}: not a spectral cube file")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen))
            if header.get("version") != 1:
                raise ValidationError(f"{path}: unsupported cube version")
            h, w = header["height"], header["width"]
            grid = WavelengthGrid.from_dict(header)
            spectra = np.frombuffer(f.read(h * w * grid.w * 4), dtype="<f4")
            mask = np.frombuffer(f.read(h * w), dtype=np.uint8)
            cost = np.frombuffer(f.read(h * w * 4), dtype="<f4")
        return cls(
            spectra=spectra.reshape(h, w, grid.w).astype(float),
            cost=cost.reshape(h, w).astype(float),
            mask=mask.reshape(h, w).astype(bool),
            grid=grid,
            iteration=header["iteration"],
            converged=header["converged"],
        )


@dataclass
class TraceRow:
    iteration: int
    mean_cost: float
    cost_cv: float
    pixels_converged: int


@dataclass
class IterationTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "mean_cost", "cost_cv", "pixels_converged"])
            for r in self.rows:
                writer.writerow([r.iteration, f"{r.mean_cost:.9g}", f"{r.cost_cv:.9g}", r.pixels_converged])

    def to_string(self) -> str:
        buf = io.StringIO()
        for r in self.rows:
            buf.write(
                f"iter {r.iteration:3d}  mean_cost {r.mean_cost:.5g}  "
                f"cv {r.cost_cv:.4g}  converged {r.pixels_converged}\n"
            )
        return buf.getvalue()


def init_spectrum(intensity: np.ndarray, light: EffectiveLight) -> Spectrum:
    """Flat starting spectrum at the channel-mean intensity.

    A constant spectrum T = t predicts t in every normalized channel, so
    the channel mean is the flat spectrum closest to the observation.
    """
    intensity = np.asarray(intensity, dtype=float)
    if intensity.shape != (light.n_channels,):
        raise ContractViolationError(
            f"intensity must have {light.n_channels} channels, got {intensity.shape}"
        )
    t = float(np.clip(intensity.mean(), 0.0, 1.0))
    return Spectrum(np.full(light.grid.w, t), light.grid)


def pixel_cost(
    t_m: Spectrum,
    intensity: np.ndarray,
    neighbors,
    light: EffectiveLight,
    grid: WavelengthGrid,
) -> float:
    """Per-pixel cost: exponential data misfit plus weighted neighbor deviation.

    `neighbors` is a sequence of (Spectrum, G) pairs whose spectra are the
    frozen mean-field values.
    """
    if t_m.grid != grid or light.grid != grid:
        raise ContractViolationError("spectrum, light and grid must agree")
    a_mat = forward_matrix(light, grid)
    intensity = np.asarray(intensity, dtype=float)
    pred = a_mat @ t_m.values
    data = float(np.exp(np.abs(pred - intensity)).sum() - a_mat.shape[0])
    n = len(neighbors)
    if n == 0:
        return data
    smooth = 0.0
    for t_n, g in neighbors:
        diff = t_m.values - t_n.values
        smooth += g * float(diff @ diff)
    return data + smooth / n


def _batch_cost_factory(a_mat, intensity, g_over_n, q_vec, r_const):
    """Vectorized pixel cost over a (P, w) batch of candidate spectra."""

    def cost(x):
        pred = x @ a_mat.T
        data = np.exp(np.abs(pred - intensity[None, :])).sum(axis=1) - a_mat.shape[0]
        smooth = g_over_n * np.einsum("ij,ij->i", x, x) - 2.0 * (x @ q_vec) + r_const
        return data + smooth

    return cost


def _solve_chunk(args):
    """Solve a chunk of independent pixels; runs in a worker process."""
    (a_mat, x0s, intensities, gsums, qs, rs, seeds_it, flat_idx, tol, cfg_dict) = args
    cfg = CmaesConfig(**cfg_dict)
    n_pix, w = x0s.shape
    out_x = np.empty_like(x0s)
    out_cost = np.empty(n_pix)
    out_conv = np.zeros(n_pix, dtype=bool)
    out_evals = np.zeros(n_pix, dtype=np.int64)
    for p in range(n_pix):
        rng = np.random.Generator(
            np.random.PCG64(
                np.random.SeedSequence(entropy=cfg.seed, spawn_key=(seeds_it, int(flat_idx[p])))
            )
        )
        cost = _batch_cost_factory(a_mat, intensities[p], gsums[p], qs[p], rs[p])
        res = cma_es_minimize(cost, x0s[p], cfg, tol, rng=rng)
        out_x[p] = res.x
        out_cost[p] = res.cost
        out_conv[p] = res.converged
        out_evals[p] = res.evaluations
    return out_x, out_cost, out_conv, out_evals


def _shift_stack(arr: np.ndarray, di: int, dj: int, fill: float = 0.0) -> np.ndarray:
    """arr sampled at (r+di, c+dj); works for (H, W) and (H, W, K)."""
    h, w = arr.shape[:2]
    out = np.full_like(arr, fill, dtype=float)
    src_r = slice(max(0, di), h + min(0, di))
    dst_r = slice(max(0, -di), h - max(0, di))
    src_c = slice(max(0, dj), w + min(0, dj))
    dst_c = slice(max(0, -dj), w - max(0, dj))
    out[dst_r, dst_c] = arr[src_r, src_c]
    return out


def data_fit_cost(spectra: np.ndarray, intensities: np.ndarray, a_mat: np.ndarray) -> np.ndarray:
    """Data term of the cost for every pixel: sum_c exp(|pred - I|) - C."""
    pred = np.einsum("hwk,ck->hwc", spectra, a_mat)
    return np.exp(np.abs(pred - intensities)).sum(axis=2) - a_mat.shape[0]


def reconstruct(
    image: RasterImage,
    light: EffectiveLight,
    grid: WavelengthGrid,
    schedule: Schedule | None = None,
    cmaes: CmaesConfig | None = None,
    *,
    t_ed: float = DEFAULT_T_ED,
    t_b: float = DEFAULT_T_B,
    smoothing_sigma: float = DEFAULT_SIGMA,
    canny_low: float = DEFAULT_CANNY_LOW,
    canny_high: float = DEFAULT_CANNY_HIGH,
    outlier_factor: float = DEFAULT_OUTLIER_FACTOR,
    threads: int = 1,
    progress=None,
) -> tuple[SpectralCube, IterationTrace]:
    """Recover a spectrum for every unmasked pixel of a calibrated image."""
    schedule = schedule or Schedule()
    cmaes = cmaes or CmaesConfig(sigma0=RECONSTRUCTION_SIGMA0)
    if light.grid != grid:
        raise ContractViolationError("light and grid must agree")
    if image.n_channels != light.n_channels:
        raise ContractViolationError("image and light channel counts differ")

    h, w_img = image.height, image.width
    mask = image.mask.copy()
    if not mask.any():
        raise EmptyInputError("every pixel is masked")
    intens = image.intensities
    a_mat = forward_matrix(light, grid)
    n_ch = a_mat.shape[0]

    # flat channel-mean start, clamped to the box
    spectra = np.clip(intens.mean(axis=2), 0.0, 1.0)[:, :, None] * np.ones(grid.w)
    cost_map = np.full((h, w_img), np.nan)
    graph = NeighborGraph(h, w_img, t_ed)
    flat_all = np.flatnonzero(mask.reshape(-1))
    trace = IterationTrace()

    pool = None
    if threads > 1:
        ctx = multiprocessing.get_context("fork")
        pool = ProcessPoolExecutor(max_workers=threads, mp_context=ctx)

    converged = False
    iteration = 0
    try:
        prev_mean = None
        for iteration in range(1, schedule.it_max + 1):
            if h < 3 or w_img < 3:
                # too small for gradient stencils; no edges anywhere
                grad = GradientField(d=np.zeros((h, w_img)), e=np.zeros((h, w_img), dtype=bool))
            elif iteration == 1:
                grad = GradientField.from_image(
                    image, sigma=smoothing_sigma, low=canny_low, high=canny_high
                )
            else:
                grad = GradientField.from_spectra(
                    spectra, mask, sigma=smoothing_sigma, low=canny_low, high=canny_high
                )
            g_maps = coupling_maps(graph, grad, t_b)

            # frozen-neighbor statistics for the quadratic smoothness term
            gsum = np.zeros((h, w_img))
            count = np.zeros((h, w_img))
            q_vec = np.zeros((h, w_img, grid.w))
            r_const = np.zeros((h, w_img))
            sq_norm = np.einsum("hwk,hwk->hw", spectra, spectra)
            for o, (di, dj) in enumerate(graph.offsets):
                nb_ok = _shift_stack(mask.astype(float), di, dj)
                g_eff = g_maps[o] * nb_ok
                gsum += g_eff
                count += nb_ok
                q_vec += g_eff[:, :, None] * _shift_stack(spectra, di, dj)
                r_const += g_eff * _shift_stack(sq_norm, di, dj)
            nz = count > 0
            for arr in (gsum, r_const):
                arr[nz] /= count[nz]
            q_vec[nz] /= count[nz][:, None]

            tol = schedule.tolerance(iteration)
            flat_sp = spectra.reshape(-1, grid.w)
            payload_x0 = flat_sp[flat_all]
            payload_i = intens.reshape(-1, n_ch)[flat_all]
            payload_g = gsum.reshape(-1)[flat_all]
            payload_q = q_vec.reshape(-1, grid.w)[flat_all]
            payload_r = r_const.reshape(-1)[flat_all]

            n_act = flat_all.size
            n_chunks = 1 if pool is None else max(1, min(n_act, threads * 4))
            bounds = np.linspace(0, n_act, n_chunks + 1).astype(int)
            tasks = []
            for b0, b1 in zip(bounds[:-1], bounds[1:]):
                if b0 == b1:
                    continue
                tasks.append(
                    (
                        a_mat,
                        payload_x0[b0:b1],
                        payload_i[b0:b1],
                        payload_g[b0:b1],
                        payload_q[b0:b1],
                        payload_r[b0:b1],
                        iteration,
                        flat_all[b0:b1],
                        tol,
                        cmaes.to_dict(),
                    )
                )
            if pool is None:
                results = [_solve_chunk(t) for t in tasks]
            else:
                results = list(pool.map(_solve_chunk, tasks))

            new_x = np.concatenate([r[0] for r in results])
            new_cost = np.concatenate([r[1] for r in results])
            new_conv = np.concatenate([r[2] for r in results])
            flat_sp[flat_all] = new_x
            spectra = flat_sp.reshape(h, w_img, grid.w)
            cost_map.reshape(-1)[flat_all] = new_cost

            mean_cost = float(new_cost.mean())
            cv = float(new_cost.std() / mean_cost) if mean_cost > 0 else 0.0
            n_conv = int(new_conv.sum())
            trace.append(TraceRow(iteration, mean_cost, cv, n_conv))
            if progress is not None:
                progress(iteration, mean_cost, n_conv, n_act)

            if prev_mean is not None and prev_mean > 0:
                if abs(mean_cost - prev_mean) / prev_mean < schedule.stop_change:
                    converged = True
                    break
            prev_mean = mean_cost
    finally:
        if pool is not None:
            pool.shutdown()

    # light-condensing pixels: the forward model cannot reach their
    # intensity with T <= 1, which shows up as an abnormal data-fit cost
    dcost = data_fit_cost(spectra, intens, a_mat)
    med = float(np.median(dcost[mask]))
    threshold = max(outlier_factor * med, _outlier_floor(n_ch))
    final_mask = mask & ~(dcost > threshold)

    cube = SpectralCube(
        spectra=spectra,
        cost=cost_map,
        mask=final_mask,
        grid=grid,
        iteration=iteration,
        converged=converged,
    )
    return cube, trace
