"""Registration quality metrics.

Landmark registration error with percentile summaries, label-overlap Dice,
95th-percentile symmetric surface distance, and the convergence-rate
bucketing used for capture-range studies, plus plain-text report tables.
All distances are world millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.ndimage
import scipy.spatial.distance

from .errors import DataError
from .transform import TransformChain, apply_point

# above this many surface voxels the pairwise-distance matrix stops being
# reasonable and hd95 switches to a distance transform
BRUTE_FORCE_SURFACE_LIMIT = 10_000

CONVERGED_FRE_MM = 15.0
DEFAULT_BUCKET_EDGES = (0.0, 25.0, 50.0, 75.0, 100.0)


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered world points; pairing across sets is by index."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).copy()
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"landmarks must be (n, 3), got {pts.shape}")
        if len(pts) < 1:
            raise DataError("landmark set is empty")
        if not np.all(np.isfinite(pts)):
            raise DataError("landmarks must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class LabelVolume:
    """Integer label grid with the same world-geometry fields as Volume."""

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray
    max_label: int

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.ndim != 3 or not np.issubdtype(data.dtype, np.integer):
            raise DataError("labels must be a 3D integer array")
        if data.size and (data.min() < 0 or data.max() > self.max_label):
            raise DataError(f"labels outside [0, {self.max_label}]")
        spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3).copy()
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3, 3).copy()
        if np.any(spacing <= 0):
            raise DataError("spacing must be positive")
        if np.abs(direction.T @ direction - np.eye(3)).max() >= 1e-6:
            raise DataError("direction matrix is not orthonormal")
        data.flags.writeable = False
        for name, val in (("data", data), ("spacing", spacing),
                          ("origin", origin), ("direction", direction)):
            object.__setattr__(self, name, val)

    def same_grid(self, other: "LabelVolume", tol: float = 1e-9) -> bool:
        return (self.data.shape == other.data.shape
                and np.allclose(self.spacing, other.spacing, atol=tol)
                and np.allclose(self.origin, other.origin, atol=tol)
                and np.allclose(self.direction, other.direction, atol=tol))


class BucketStat(NamedTuple):
    lo: float
    hi: float
    n_cases: int
    converged: float | None


# ---- landmark metrics --------------------------------------------------------


def fre(fixed_lms: LandmarkSet, moving_lms: LandmarkSet,
        chain: TransformChain) -> float:
    """Mean distance between fixed landmarks and their mapped partners."""
    if len(fixed_lms) != len(moving_lms):
        raise DataError(f"landmark counts differ: {len(fixed_lms)} vs "
                        f"{len(moving_lms)}")
    mapped = apply_point(chain, moving_lms.points)
    return float(np.mean(np.linalg.norm(fixed_lms.points - mapped, axis=1)))


def fre_percentiles(per_case_fres) -> dict:
    """Mean and linear-interpolation quartiles of a per-case error list."""
    vals = np.asarray(per_case_fres, dtype=np.float64).ravel()
    if vals.size == 0:
        raise DataError("no per-case errors")
    p25, p50, p75 = np.percentile(vals, [25.0, 50.0, 75.0])
    return {"avg": float(vals.mean()), "p25": float(p25), "p50": float(p50),
            "p75": float(p75)}


# ---- label metrics -----------------------------------------------------------


def dice(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """2|A and B| / (|A| + |B|); two empty masks agree perfectly (1)."""
    if not a.same_grid(b):
        raise DataError("label volumes are not on the same grid")
    ma = a.data == label
    mb = b.data == label
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / denom


def surface_mask(data: np.ndarray, label: int) -> np.ndarray:
    """Labeled voxels with at least one unlabeled 6-neighbor (outside counts)."""
    mask = data == label
    pad = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (1, -1):
            interior &= np.roll(pad, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def _surface_points_world(lv: LabelVolume, label: int) -> np.ndarray:
    zz, yy, xx = np.nonzero(surface_mask(lv.data, label))
    idx = np.stack([xx, yy, zz], axis=1).astype(np.float64)
    return (idx * lv.spacing) @ lv.direction.T + lv.origin


def _directed_p95_brute(src: np.ndarray, dst: np.ndarray) -> float:
    d = scipy.spatial.distance.cdist(src, dst).min(axis=1)
    return float(np.percentile(d, 95.0))


def _directed_p95_edt(src_mask, dst_mask, spacing) -> float:
    # exact Euclidean distance to the nearest dst surface voxel center
    dist = scipy.ndimage.distance_transform_edt(~dst_mask, sampling=spacing[::-1])
    return float(np.percentile(dist[src_mask], 95.0))


def hd95(a: LabelVolume, b: LabelVolume, label: int, method: str = "auto") -> float:
    """Symmetric 95th-percentile surface distance in mm.

    Brute-force pairwise distances up to BRUTE_FORCE_SURFACE_LIMIT surface
    voxels per mask, a sampled distance transform beyond; both give the same
    answer on orthonormal grids and are selectable for cross-checking.
    """
    if not a.same_grid(b):
        raise DataError("label volumes are not on the same grid")
    if method not in ("auto", "brute", "edt"):
        raise DataError(f"unknown method {method!r}")
    sa = surface_mask(a.data, label)
    sb = surface_mask(b.data, label)
    na, nb = int(sa.sum()), int(sb.sum())
    if na == 0 or nb == 0:
        raise DataError(f"label {label} has an empty mask")
    if method == "auto":
        method = "brute" if max(na, nb) <= BRUTE_FORCE_SURFACE_LIMIT else "edt"
    if method == "brute":
        pa = _surface_points_world(a, label)
        pb = _surface_points_world(b, label)
        return max(_directed_p95_brute(pa, pb), _directed_p95_brute(pb, pa))
    return max(_directed_p95_edt(sa, sb, a.spacing),
               _directed_p95_edt(sb, sa, a.spacing))


# ---- capture range -----------------------------------------------------------


def convergence_buckets(initial_fres, final_fres,
                        threshold: float = CONVERGED_FRE_MM,
                        bucket_edges=DEFAULT_BUCKET_EDGES) -> list:
    """Converged fraction (final FRE < threshold) per initial-error bucket.

    Buckets are [e0,e1), ..., [e_{k-1}, e_k] with the last upper edge
    inclusive; cases outside the edge span are ignored. Empty buckets report
    converged = None.
    """
    init = np.asarray(initial_fres, dtype=np.float64).ravel()
    final = np.asarray(final_fres, dtype=np.float64).ravel()
    if init.size != final.size:
        raise DataError(f"case counts differ: {init.size} vs {final.size}")
    edges = np.asarray(bucket_edges, dtype=np.float64)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise DataError("bucket edges must be increasing with >= 2 entries")
    out = []
    for k in range(edges.size - 1):
        lo, hi = edges[k], edges[k + 1]
        if k == edges.size - 2:
            sel = (init >= lo) & (init <= hi)
        else:
            sel = (init >= lo) & (init < hi)
        n = int(sel.sum())
        frac = float(np.mean(final[sel] < threshold)) if n else None
        out.append(BucketStat(float(lo), float(hi), n, frac))
    return out


# ---- report tables -----------------------------------------------------------


def format_table1(rows) -> str:
    """Fixed-width FRE summary; one (method, mode, stats-dict) per row."""
    lines = [f"{'Method':<12}{'Mode':<8}{'Avg. FRE':>8}{'FRE25':>7}"
             f"{'FRE50':>7}{'FRE75':>7}"]
    for method, mode, st in rows:
        lines.append(f"{method:<12}{mode:<8}{st['avg']:>8.2f}{st['p25']:>7.2f}"
                     f"{st['p50']:>7.2f}{st['p75']:>7.2f}")
    return "\n".join(lines)


def format_table3(rows) -> str:
    """Capture-range summary; rows are
    (similarity, search, fractions-or-None, seconds, n_evals[, estimated]).

    ``fractions`` are the four bucket convergence rates in [0, 1]; None
    renders as N/A. ``estimated`` marks extrapolated cost figures with *.
    """
    lines = [f"{'Similarity':<12}{'Search':<8}{'0-25mm':>8}{'25-50mm':>9}"
             f"{'50-75mm':>9}{'75-100mm':>10}{'Time (s)':>10}{'Num. eval.':>12}"]
    for row in rows:
        similarity, search, fractions, seconds, n_evals = row[:5]
        estimated = bool(row[5]) if len(row) > 5 else False
        if fractions is None:
            cells = [f"{'N/A':>8}", f"{'N/A':>9}", f"{'N/A':>9}", f"{'N/A':>10}"]
        else:
            if len(fractions) != 4:
                raise DataError("expected four bucket fractions")
            pct = [f"{100.0 * f:.1f}%" for f in fractions]
            cells = [f"{pct[0]:>8}", f"{pct[1]:>9}", f"{pct[2]:>9}",
                     f"{pct[3]:>10}"]
        star = "*" if estimated else ""
        lines.append(f"{similarity:<12}{search:<8}" + "".join(cells)
                     + f"{f'{seconds:.1f}{star}':>10}{f'{n_evals:d}{star}':>12}")
    return "\n".join(lines)


# ---- landmark files ----------------------------------------------------------


def load_landmarks(path) -> LandmarkSet:
    """CSV with one "x,y,z" world-mm point per line; blank lines skipped."""
    pts = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            parts = s.split(",")
            if len(parts) != 3:
                raise DataError(f"{path}:{ln}: expected x,y,z")
            try:
                pts.append([float(p) for p in parts])
            except ValueError:
                raise DataError(f"{path}:{ln}: non-numeric coordinate") from None
    if not pts:
        raise DataError(f"{path}: no landmarks")
    return LandmarkSet(np.array(pts))


def save_landmarks(lms: LandmarkSet, path) -> None:
    with open(path, "w") as fh:
        for p in lms.points:
            fh.write(f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")
