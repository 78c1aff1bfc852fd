"""Edge-aware coupling between neighbor pixels.

The smoothness penalty between pixels m and n is weighted by a
discontinuousness measure

    G_mn = (1 / L_mn) * prod_{k in B_mn} ( [E_k = 0] + [E_k != 0] * (1 - T_b) * (1 - D_k) )

where B_mn is the set of intermediate pixels on the Bresenham line from m
to n, L_mn the Euclidean distance, D_k a normalized gradient magnitude and
E_k an edge classification. Crossing an edge pixel with a strong gradient
makes the coupling small, so spectra are free to differ across boundaries.

With the default neighborhood radius 1 every B_mn is empty and G_mn = 1;
the machinery becomes active for radius > 1.

Gradients come from the image on the first reconstruction iteration
(first principal component -> Gaussian smoothing -> central differences)
and from spectral dissimilarity of the current guess on later iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractViolationError
from .spectral_model import RasterImage

DEFAULT_T_ED = 1.0
DEFAULT_T_B = 0.9
DEFAULT_SIGMA = 0.5
DEFAULT_CANNY_LOW = 0.1
DEFAULT_CANNY_HIGH = 0.3


def pca_grayscale(image: RasterImage) -> np.ndarray:
    """Project each pixel onto the first principal component, mapped to [0, 1].

    The principal direction is estimated from unmasked pixels; its sign is
    chosen so the projection correlates positively with the per-pixel
    channel mean. Degenerate covariance falls back to the channel mean.
    """
    if image.n_channels < 2:
        raise ContractViolationError("pca_grayscale needs at least 2 channels")
    data = image.intensities.reshape(-1, image.n_channels)
    sel = image.mask.reshape(-1)
    pts = data[sel]
    channel_mean = data.mean(axis=1)

    fallback = channel_mean.reshape(image.mask.shape)
    if pts.shape[0] < 2:
        return _rescale01(fallback, image.mask)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / (pts.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[-1] <= 1e-15:
        return _rescale01(fallback, image.mask)
    direction = eigvecs[:, -1]
    proj = data @ direction
    corr = np.corrcoef(proj[sel], channel_mean[sel])[0, 1] if pts.shape[0] > 1 else 1.0
    if np.isfinite(corr) and corr < 0:
        proj = -proj
    return _rescale01(proj.reshape(image.mask.shape), image.mask)


def _rescale01(field: np.ndarray, mask: np.ndarray) -> np.ndarray:
    vals = field[mask] if mask.any() else field.reshape(-1)
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo <= 0:
        return np.zeros_like(field)
    return np.clip((field - lo) / (hi - lo), 0.0, 1.0)


def gaussian_smooth(field: np.ndarray, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """2D Gaussian blur, kernel truncated at radius ceil(3*sigma), reflective edges."""
    if sigma <= 0:
        raise ContractViolationError("sigma must be positive")
    radius = math.ceil(3 * sigma)
    return ndimage.gaussian_filter(
        np.asarray(field, dtype=float), sigma, mode="reflect", radius=radius
    )


def central_gradient(field: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Central-difference gradient magnitude (one-sided at borders)."""
    field = np.asarray(field, dtype=float)
    if field.shape[0] < 3 or field.shape[1] < 3:
        raise ContractViolationError("field must be at least 3x3")
    gr, gc = np.gradient(field)
    mag = np.hypot(gr, gc)
    if normalize:
        peak = mag.max()
        if peak > 0:
            mag = mag / peak
    return mag


def spectral_gradient(spectra: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Spectral dissimilarity field for non-first iterations.

    For each axis the zero-lag normalized cross-correlation (cosine
    similarity) between the spectra of the two axis-neighbors is turned
    into a dissimilarity 1 - corr; the two axes merge by the Euclidean
    norm and the result is normalized to [0, 1]. Borders fall back to the
    one-sided pair. Zero-norm spectra count as perfectly correlated
    (no evidence of an edge).
    """
    spectra = np.asarray(spectra, dtype=float)
    if spectra.ndim != 3:
        raise ContractViolationError("spectra must be (H, W, w)")
    h, w_img = spectra.shape[:2]

    def axis_dissimilarity(axis: int) -> np.ndarray:
        # replicate-pad so border pixels correlate their single neighbor pair
        padded = np.concatenate(
            [
                np.take(spectra, [0], axis=axis),
                spectra,
                np.take(spectra, [-1], axis=axis),
            ],
            axis=axis,
        )
        n = padded.shape[axis]
        before = np.take(padded, range(0, n - 2), axis=axis)
        after = np.take(padded, range(2, n), axis=axis)
        dot = np.einsum("ijk,ijk->ij", before, after)
        nb = np.linalg.norm(before, axis=2)
        na = np.linalg.norm(after, axis=2)
        denom = nb * na
        corr = np.ones((h, w_img))
        ok = denom > 1e-300
        corr[ok] = dot[ok] / denom[ok]
        return 1.0 - np.clip(corr, -1.0, 1.0)

    d = np.hypot(axis_dissimilarity(0), axis_dissimilarity(1))
    if mask is not None:
        vals = d[mask]
        peak = vals.max() if vals.size else 0.0
    else:
        peak = d.max()
    if peak > 1e-12:  # below that it is cosine round-off, not structure
        d = np.clip(d / peak, 0.0, 1.0)
    else:
        d = np.zeros_like(d)
    if mask is not None:
        d[~mask] = 0.0
    return d


def canny_edges(field: np.ndarray, low: float = DEFAULT_CANNY_LOW, high: float = DEFAULT_CANNY_HIGH) -> np.ndarray:
    """Canny edge classification of a scalar field.

    Central-difference gradient, magnitude normalized by its maximum,
    non-maximum suppression with 4-direction quantization, double
    threshold on the normalized magnitude, hysteresis by 8-connected
    flood from strong edges.
    """
    if not (0 < low < high <= 1):
        raise ContractViolationError("need 0 < low < high <= 1")
    field = np.asarray(field, dtype=float)
    gr, gc = np.gradient(field)
    mag = np.hypot(gr, gc)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(field.shape, dtype=bool)
    mag = mag / peak

    angle = np.mod(np.arctan2(gr, gc), np.pi)
    octant = ((angle + np.pi / 8) // (np.pi / 4)).astype(int) % 4
    # quantized gradient direction -> (dr, dc) of the forward neighbor
    steps = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}

    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros(field.shape, dtype=bool)
    core = padded[1:-1, 1:-1]
    for q, (dr, dc) in steps.items():
        fwd = padded[1 + dr : padded.shape[0] - 1 + dr, 1 + dc : padded.shape[1] - 1 + dc]
        bwd = padded[1 - dr : padded.shape[0] - 1 - dr, 1 - dc : padded.shape[1] - 1 - dc]
        sel = octant == q
        # strict on the forward side breaks plateau ties -> 1 px wide lines
        keep[sel] = (core[sel] > fwd[sel]) & (core[sel] >= bwd[sel])

    strong = keep & (mag >= high)
    weak = keep & (mag >= low)
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    good = np.unique(labels[strong])
    good = good[good != 0]
    return np.isin(labels, good)


def bresenham_line(m: tuple[int, int], n: tuple[int, int]) -> list[tuple[int, int]]:
    """Intermediate pixels of the integer Bresenham line from m to n.

    Endpoints are excluded. The path is always rasterized from the
    lexicographically smaller endpoint so the set is symmetric in (m, n).
    """
    if m == n:
        raise ContractViolationError("endpoints must differ")
    if n < m:
        m, n = n, m
    r0, c0 = m
    r1, c1 = n
    dr = abs(r1 - r0)
    dc = -abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dr + dc
    points = []
    r, c = r0, c0
    while True:
        if (r, c) != (r0, c0) and (r, c) != (r1, c1):
            points.append((r, c))
        if (r, c) == (r1, c1):
            break
        e2 = 2 * err
        if e2 >= dc:
            err += dc
            r += sr
        if e2 <= dr:
            err += dr
            c += sc
    return points


@dataclass(frozen=True, eq=False)
class GradientField:
    """Normalized gradient magnitude D plus edge classification E."""

    d: np.ndarray  # (H, W) in [0, 1]
    e: np.ndarray  # (H, W) bool

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        e = np.asarray(self.e, dtype=bool)
        if d.shape != e.shape or d.ndim != 2:
            raise ContractViolationError("D and E must be matching 2D fields")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "e", e)

    @classmethod
    def from_image(
        cls,
        image: RasterImage,
        sigma: float = DEFAULT_SIGMA,
        low: float = DEFAULT_CANNY_LOW,
        high: float = DEFAULT_CANNY_HIGH,
    ) -> "GradientField":
        """First-iteration recipe: PCA grayscale, smooth, gradient, Canny."""
        gray = pca_grayscale(image) if image.n_channels >= 2 else _rescale01(
            image.intensities[:, :, 0], image.mask
        )
        smooth = gaussian_smooth(gray, sigma)
        d = central_gradient(smooth)
        e = canny_edges(smooth, low, high)
        d[~image.mask] = 0.0
        e[~image.mask] = False
        return cls(d=d, e=e)

    @classmethod
    def from_spectra(
        cls,
        spectra: np.ndarray,
        mask: np.ndarray,
        sigma: float = DEFAULT_SIGMA,
        low: float = DEFAULT_CANNY_LOW,
        high: float = DEFAULT_CANNY_HIGH,
    ) -> "GradientField":
        """Later-iteration recipe: spectral dissimilarity field plus Canny on it."""
        d = spectral_gradient(spectra, mask)
        e = canny_edges(gaussian_smooth(d, sigma), low, high)
        d = d.copy()
        d[~mask] = 0.0
        e[~mask] = False
        return cls(d=d, e=e)


class NeighborGraph:
    """Neighborhood structure for a fixed raster shape and radius.

    Neighbor offsets and their Bresenham intermediates are translation
    invariant, so they are computed once per (radius) and shared by every
    pixel; per-pair queries resolve them against absolute coordinates.
    """

    def __init__(self, height: int, width: int, t_ed: float = DEFAULT_T_ED):
        if t_ed < 1:
            raise ContractViolationError("neighborhood radius must be >= 1")
        self.height = height
        self.width = width
        self.t_ed = float(t_ed)
        self.offsets: list[tuple[int, int]] = []
        self.lengths: list[float] = []
        self.intermediates: list[list[tuple[int, int]]] = []
        r = int(math.floor(self.t_ed))
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                if (di, dj) == (0, 0) or di * di + dj * dj > self.t_ed**2:
                    continue
                self.offsets.append((di, dj))
                self.lengths.append(math.hypot(di, dj))
                # bresenham_line already rasterizes from the canonical endpoint,
                # and lexicographic order is translation invariant
                self.intermediates.append(bresenham_line((0, 0), (di, dj)))

    def neighbors(self, m: tuple[int, int]) -> list[tuple[int, int]]:
        r, c = m
        out = []
        for di, dj in self.offsets:
            i, j = r + di, c + dj
            if 0 <= i < self.height and 0 <= j < self.width:
                out.append((i, j))
        return out


def discontinuousness(
    m: tuple[int, int],
    n: tuple[int, int],
    graph: NeighborGraph,
    grad: GradientField,
    t_b: float = DEFAULT_T_B,
) -> float:
    """Coupling weight G_mn between neighbor pixels m and n."""
    for p in (m, n):
        if not (0 <= p[0] < graph.height and 0 <= p[1] < graph.width):
            raise ContractViolationError(f"pixel {p} outside the {graph.height}x{graph.width} raster")
    delta = (n[0] - m[0], n[1] - m[1])
    try:
        idx = graph.offsets.index(delta)
    except ValueError:
        raise ContractViolationError(f"{n} is not in the neighborhood of {m}") from None
    product = 1.0
    for di, dj in graph.intermediates[idx]:
        k = (m[0] + di, m[1] + dj)
        if grad.e[k]:
            product *= (1.0 - t_b) * (1.0 - grad.d[k])
    return product / graph.lengths[idx]


def coupling_maps(
    graph: NeighborGraph, grad: GradientField, t_b: float = DEFAULT_T_B
) -> np.ndarray:
    """G_mn for every pixel and neighbor offset, vectorized.

    Returns an array of shape (n_offsets, H, W) where entry (o, r, c) is
    G between pixel (r, c) and its o-th offset neighbor; positions whose
    neighbor falls outside the raster hold 0.
    """
    h, w = graph.height, graph.width
    term = np.where(grad.e, (1.0 - t_b) * (1.0 - grad.d), 1.0)
    out = np.zeros((len(graph.offsets), h, w))
    for o, (off, length, inters) in enumerate(
        zip(graph.offsets, graph.lengths, graph.intermediates)
    ):
        g = np.ones((h, w))
        for di, dj in inters:
            g *= _shifted(term, di, dj, fill=1.0)
        g /= length
        # zero out pixels whose neighbor is outside the raster
        di, dj = off
        valid = np.zeros((h, w), dtype=bool)
        rs = slice(max(0, -di), h - max(0, di))
        cs = slice(max(0, -dj), w - max(0, dj))
        valid[rs, cs] = True
        out[o] = np.where(valid, g, 0.0)
    return out


def _shifted(a: np.ndarray, di: int, dj: int, fill: float) -> np.ndarray:
    """a evaluated at (r + di, c + dj), `fill` outside the raster."""
    h, w = a.shape
    out = np.full((h, w), fill, dtype=a.dtype)
    src_r = slice(max(0, di), h + min(0, di))
    dst_r = slice(max(0, -di), h - max(0, di))
    src_c = slice(max(0, dj), w + min(0, dj))
    dst_c = slice(max(0, -dj), w - max(0, dj))
    out[dst_r, dst_c] = a[src_r, src_c]
    return out
