"""Patch similarities (SSD, NCC, LC2, MIND-SSC) and the weighted global objective.

LC2 scores how well a fixed-image patch is explained by an affine combination
of the moving patch's intensities and gradient magnitudes:

    fixed ~ a*moving + b*moving_grad + c        (least squares per patch)
    LC2 = 1 - Var(residual)/Var(fixed),  clamped to [0, 1]

The direction is intentionally asymmetric: the moving image supplies the two
regression columns. Multi-radius variants average radii {3, 5, 7} (voxels);
the global objective is the variance-weighted mean over a strided center grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, NumericalError
from .transform import TransformChain, apply_point
from .volume import Patch, Volume, gradient_magnitude, local_variance, sample_trilinear
from .volume import extract_patch, _trilinear_indices_clamped

LC2_RADII = (3, 5, 7)
EPS_VAR = 1e-10


# ---- simple patch similarities -----------------------------------------------


def ssd_patch(p1: Patch, p2: Patch) -> float:
    """Mean squared intensity difference; 0 for identical patches."""
    if p1.radius != p2.radius:
        raise DataError("patch radius mismatch")
    d = p1.data.astype(np.float64) - p2.data.astype(np.float64)
    return float(np.mean(d * d))


def ncc_patch(p1: Patch, p2: Patch) -> float:
    """Pearson correlation of the two value sequences, in [-1, 1]."""
    if p1.radius != p2.radius:
        raise DataError("patch radius mismatch")
    a = p1.data.astype(np.float64)
    b = p2.data.astype(np.float64)
    a = a - a.mean()
    b = b - b.mean()
    va = np.mean(a * a)
    vb = np.mean(b * b)
    if va <= EPS_VAR or vb <= EPS_VAR:
        raise NumericalError("degenerate patch")
    return float(np.clip(np.mean(a * b) / np.sqrt(va * vb), -1.0, 1.0))


# ---- LC2 ---------------------------------------------------------------------


def _lc2_fit_flat(y: np.ndarray, m: np.ndarray, g: np.ndarray):
    """LC2 of flat f64 arrays; returns (value, degenerate_fixed)."""
    n = y.size
    A = np.empty((3, 3))
    A[0, 0] = m @ m
    A[0, 1] = A[1, 0] = m @ g
    A[0, 2] = A[2, 0] = m.sum()
    A[1, 1] = g @ g
    A[1, 2] = A[2, 1] = g.sum()
    A[2, 2] = n
    b = np.array([m @ y, g @ y, y.sum()])
    syy = y @ y
    vy = syy / n - (y.sum() / n) ** 2
    if vy <= EPS_VAR:
        return 0.0, True
    # damping large enough to keep degenerate fits finite, small enough that
    # the affine invariances of the undamped solution survive at 1e-6
    lam = 1e-9 * np.trace(A)
    beta = np.linalg.solve(A + lam * np.eye(3), b)
    rss = max(syy - 2.0 * (beta @ b) + beta @ A @ beta, 0.0)
    ratio = (rss / n) / vy
    if ratio <= 1e-12:  # fit is exact to working precision
        return 1.0, False
    return float(np.clip(1.0 - ratio, 0.0, 1.0)), False


def lc2_patch(fixed: Patch, moving: Patch, moving_grad: Patch) -> float:
    """LC2 of one patch triple; a constant fixed patch scores 0 (degenerate)."""
    if not (fixed.radius == moving.radius == moving_grad.radius):
        raise DataError("patch radius mismatch")
    value, _ = _lc2_fit_flat(fixed.data.astype(np.float64),
                             moving.data.astype(np.float64),
                             moving_grad.data.astype(np.float64))
    return value


def lc2_multiradius(fixed: Volume, moving: Volume, moving_grad: Volume,
                    center_index, radii=LC2_RADII) -> float:
    """Mean LC2 over the admissible radii at one center.

    Radii whose cube leaves the grid are dropped; no admissible radius -> 0.
    The three volumes must share dims (moving already resampled to the fixed
    grid by the caller).
    """
    if not (fixed.data.shape == moving.data.shape == moving_grad.data.shape):
        raise DataError("volume shape mismatch")
    cx, cy, cz = (int(c) for c in center_index)
    nx, ny, nz = fixed.dims
    vals = []
    for r in radii:
        if not (r <= cx < nx - r and r <= cy < ny - r and r <= cz < nz - r):
            continue
        vals.append(lc2_patch(extract_patch(fixed, (cx, cy, cz), r),
                              extract_patch(moving, (cx, cy, cz), r),
                              extract_patch(moving_grad, (cx, cy, cz), r)))
    return float(np.mean(vals)) if vals else 0.0


def _box_sum(arr: np.ndarray, size: int) -> np.ndarray:
    return ndimage.uniform_filter(arr, size=size, mode="constant", cval=0.0) * float(size ** 3)


def _lc2_value_count_maps(fdata, mdata, gdata, inside, radii):
    """Per-voxel multiradius LC2 via separable box sums.

    Returns (value_sum, radius_count) f64 arrays over the fixed grid. A radius
    counts at a center only when its whole cube is in the grid and every cube
    voxel sampled the moving volume in bounds.
    """
    y = fdata.astype(np.float64)
    m = mdata.astype(np.float64)
    g = gdata.astype(np.float64)
    nz, ny, nx = y.shape
    value_sum = np.zeros_like(y)
    count = np.zeros_like(y)
    ins = inside.astype(np.float64)
    for r in radii:
        size = 2 * r + 1
        n = float(size ** 3)
        sm, sg, sy = _box_sum(m, size), _box_sum(g, size), _box_sum(y, size)
        smm, sgg, syy = _box_sum(m * m, size), _box_sum(g * g, size), _box_sum(y * y, size)
        smg = _box_sum(m * g, size)
        smy, sgy = _box_sum(m * y, size), _box_sum(g * y, size)

        valid = np.zeros_like(y, dtype=bool)
        if nx > 2 * r and ny > 2 * r and nz > 2 * r:
            valid[r:nz - r, r:ny - r, r:nx - r] = True
        full = ndimage.minimum_filter(ins, size=size, mode="constant", cval=0.0) > 0.5
        valid &= full

        # symmetric 3x3 normal equations, closed-form damped solve
        a, bq, c = smm, sgg, np.full_like(y, n)
        d, e, f = smg, sm, sg
        lam = 1e-9 * (a + bq + c)
        ad, bd, cd = a + lam, bq + lam, c + lam
        det = (ad * (bd * cd - f * f) - d * (d * cd - f * e) + e * (d * f - bd * e))
        i00 = bd * cd - f * f
        i01 = e * f - d * cd
        i02 = d * f - e * bd
        i11 = ad * cd - e * e
        i12 = e * d - ad * f
        i22 = ad * bd - d * d
        b0, b1, b2 = smy, sgy, sy
        with np.errstate(divide="ignore", invalid="ignore"):
            beta0 = (i00 * b0 + i01 * b1 + i02 * b2) / det
            beta1 = (i01 * b0 + i11 * b1 + i12 * b2) / det
            beta2 = (i02 * b0 + i12 * b1 + i22 * b2) / det
            rss = (syy - 2.0 * (beta0 * b0 + beta1 * b1 + beta2 * b2)
                   + beta0 * (a * beta0 + d * beta1 + e * beta2)
                   + beta1 * (d * beta0 + bq * beta1 + f * beta2)
                   + beta2 * (e * beta0 + f * beta1 + c * beta2))
            vy = syy / n - (sy / n) ** 2
            ratio = (np.maximum(rss, 0.0) / n) / vy
        val = np.where(ratio <= 1e-12, 1.0, np.clip(1.0 - ratio, 0.0, 1.0))
        val = np.where(vy > EPS_VAR, val, 0.0)
        value_sum += np.where(valid, val, 0.0)
        count += valid
    return value_sum, count


# ---- weight map and the global objective -------------------------------------


@dataclass(frozen=True)
class WeightMap:
    """Non-negative per-voxel weights on a volume grid."""

    volume: Volume
    total_weight: float

    def __post_init__(self):
        if np.any(self.volume.data < 0):
            raise DataError("weights must be non-negative")
        s = float(self.volume.data.sum(dtype=np.float64))
        if abs(s - self.total_weight) > 1e-4 * max(abs(s), 1.0):
            raise DataError("total_weight does not match the data sum")


def weight_map(fixed: Volume, radius: int = 7) -> WeightMap:
    """Local-variance weights: structured regions dominate the objective."""
    var = local_variance(fixed, radius)
    return WeightMap(var, float(var.data.sum(dtype=np.float64)))


def _warp_scalar_grids(fixed: Volume, moving: Volume, moving_grad: Volume,
                       chain: TransformChain):
    """Sample moving and its gradient magnitude on the fixed grid through T."""
    nx, ny, nz = fixed.dims
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    idx = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(np.float64)
    pts = apply_point(chain, fixed.world_from_index(idx))
    mvals, inside = sample_trilinear(moving, pts)
    gvals, _ = sample_trilinear(moving_grad, pts)
    shape = fixed.data.shape
    return mvals.reshape(shape), gvals.reshape(shape), inside.reshape(shape)


def lc2_global(fixed: Volume, moving: Volume, chain: TransformChain,
               weights: WeightMap | None = None, sample_grid_step: int = 2,
               radii=LC2_RADII, moving_grad: Volume | None = None) -> float:
    """Weighted mean multiradius LC2 over a strided center grid.

    Centers with no admissible radius (cube out of the fixed grid, or any cube
    voxel mapping outside the moving volume) carry zero weight. Raises
    "no overlap" when every center is excluded or all weight is zero.
    """
    if sample_grid_step < 1:
        raise DataError("sample_grid_step must be >= 1")
    if weights is None:
        weights = weight_map(fixed)
    if not weights.volume.same_grid(fixed):
        raise DataError("weight map grid mismatch")
    if moving_grad is None:
        moving_grad = gradient_magnitude(moving)
    m, g, inside = _warp_scalar_grids(fixed, moving, moving_grad, chain)
    value_sum, count = _lc2_value_count_maps(fixed.data, m, g, inside, radii)
    s = slice(None, None, sample_grid_step)
    vs, cnt = value_sum[s, s, s], count[s, s, s]
    w = weights.volume.data[s, s, s].astype(np.float64)
    sel = cnt > 0
    total = float(w[sel].sum())
    if total <= 0.0:
        raise NumericalError("no overlap")
    vals = vs[sel] / cnt[sel]
    return float((w[sel] * vals).sum() / total)


def lc2_heatmap(fixed: Volume, moving: Volume, chain: TransformChain,
                radii=LC2_RADII, moving_grad: Volume | None = None) -> Volume:
    """Per-voxel multiradius LC2 on the fixed grid (0 where undefined)."""
    if moving_grad is None:
        moving_grad = gradient_magnitude(moving)
    m, g, inside = _warp_scalar_grids(fixed, moving, moving_grad, chain)
    value_sum, count = _lc2_value_count_maps(fixed.data, m, g, inside, radii)
    out = np.where(count > 0, value_sum / np.maximum(count, 1), 0.0)
    return fixed.with_data(out.astype(np.float32))


# ---- MIND-SSC ----------------------------------------------------------------

_N6 = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
# the 12 unique orthogonal offset pairs (squared separation 2)
MIND_PAIRS = [(i, j) for i in range(6) for j in range(i + 1, 6)
              if int(np.sum((_N6[i] - _N6[j]) ** 2)) == 2]


@dataclass(frozen=True)
class MindDescriptor:
    """12-channel self-similarity descriptor, channels in [0, 1]."""

    data: np.ndarray  # (12, nz, ny, nx) float32
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != len(MIND_PAIRS):
            raise DataError("descriptor needs shape (12, nz, ny, nx)")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    def index_from_world(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return ((pts - self.origin) @ self.direction) / self.spacing


def _shift_edge(data: np.ndarray, offset) -> np.ndarray:
    """data evaluated at index + offset, edge-replicated at the border."""
    ox, oy, oz = (int(o) for o in offset)
    nz, ny, nx = data.shape
    pad = np.pad(data, 1, mode="edge")
    return pad[1 + oz:1 + oz + nz, 1 + oy:1 + oy + ny, 1 + ox:1 + ox + nx]


def mind_ssc(v: Volume) -> MindDescriptor:
    """Self-similarity-context descriptor of a volume.

    Distances are Gaussian-patch (sigma 0.8 voxels, kernel radius 2) squared
    differences between the 12 orthogonal 6-neighborhood offset pairs;
    channels are exp(-D/V) with V the per-voxel mean distance (floored at
    1e-6 of its global mean), max-normalized per voxel.
    """
    if min(v.dims) < 5:
        raise DataError("mind_ssc needs dims >= 5 per axis")
    data = v.data.astype(np.float64)
    shifted = [_shift_edge(data, o) for o in _N6]
    dists = np.empty((len(MIND_PAIRS),) + data.shape)
    for k, (i, j) in enumerate(MIND_PAIRS):
        diff = shifted[i] - shifted[j]
        dists[k] = ndimage.gaussian_filter(diff * diff, sigma=0.8, radius=2, mode="nearest")
    var = dists.mean(axis=0)
    mv = float(var.mean())
    floor = 1e-6 * mv if mv > 0 else 1.0
    var = np.maximum(var, floor)
    desc = np.exp(-dists / var)
    desc /= desc.max(axis=0, keepdims=True)
    return MindDescriptor(desc.astype(np.float32), v.spacing, v.origin, v.direction)


def mind_similarity(d_fixed: MindDescriptor, d_moving: MindDescriptor,
                    chain: TransformChain) -> float:
    """Negative mean channel SSD over in-overlap voxels (0 is a perfect match)."""
    nz, ny, nx = d_fixed.data.shape[1:]
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    idx = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(np.float64)
    world = (idx * d_fixed.spacing) @ d_fixed.direction.T + d_fixed.origin
    midx = d_moving.index_from_world(apply_point(chain, world))
    mdims = np.array([d_moving.data.shape[3], d_moving.data.shape[2],
                      d_moving.data.shape[1]], dtype=np.float64)
    inside = np.all((midx >= 0.0) & (midx <= mdims - 1.0), axis=1)
    if not inside.any():
        raise NumericalError("no overlap")
    ix, iy, iz = midx[inside, 0], midx[inside, 1], midx[inside, 2]
    acc = 0.0
    for k in range(d_fixed.n_channels):
        warped = _trilinear_indices_clamped(d_moving.data[k].astype(np.float64), ix, iy, iz)
        diff = d_fixed.data[k].ravel()[inside].astype(np.float64) - warped
        acc += float(np.mean(diff * diff))
    return -acc / d_fixed.n_channels
