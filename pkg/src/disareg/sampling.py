"""Unsupervised generation of training patch pairs.

Each record pairs a cube from the moving volume with one from the fixed
volume and carries their multi-radius LC2 as the regression target. Source
centers follow the local-variance weights. The partner is not the best
match but the candidate whose similarity lies closest to a uniform draw,
which flattens the target distribution over [0, 1] instead of letting it
cluster near the extremes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .metrics import LC2_RADII, lc2_patch, weight_map
from .volume import Volume, extract_patch, gradient_magnitude

DISAP1_MAGIC = b"DISAP1\x00\x00"
PATCH_RADIUS = 7
PATCH_SIDE = 2 * PATCH_RADIUS + 1

# which volume supplies the intensity and gradient columns of the LC2 fit
GRAD_FROM_MOVING = 0
GRAD_FROM_FIXED = 1

_HEADER_FMT = "<8sIIB"


@dataclass(frozen=True)
class PatchPairRecord:
    """One training example: two cubes and their similarity target."""

    patch_m: np.ndarray
    patch_f: np.ndarray
    target: float

    def __post_init__(self):
        pm = np.ascontiguousarray(self.patch_m, dtype=np.float32)
        pf = np.ascontiguousarray(self.patch_f, dtype=np.float32)
        side = (PATCH_SIDE,) * 3
        if pm.shape != side or pf.shape != side:
            raise DataError(f"patches must be {PATCH_SIDE}^3 cubes")
        # the stored type is f32, so snap the target before validating
        target = float(np.float32(self.target))
        if not 0.0 <= target <= 1.0:
            raise DataError(f"target {target} outside [0, 1]")
        pm.flags.writeable = False
        pf.flags.writeable = False
        object.__setattr__(self, "patch_m", pm)
        object.__setattr__(self, "patch_f", pf)
        object.__setattr__(self, "target", target)


@dataclass(frozen=True)
class SampleRun:
    """Record sequence plus which volume supplied the LC2 source columns."""

    records: tuple
    gradient_side: int

    def __post_init__(self):
        if self.gradient_side not in (GRAD_FROM_MOVING, GRAD_FROM_FIXED):
            raise DataError(f"unknown gradient side {self.gradient_side}")
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def weighted_draws(weights, rng, n: int) -> np.ndarray:
    """n indices drawn with probability proportional to the weights."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise DataError("empty weight vector")
    if np.any(w < 0):
        raise DataError("weights must be nonnegative")
    total = w.sum()
    if total <= 0.0:
        raise DataError("all-zero weight map")
    return rng.choice(w.size, size=n, p=w / total)


def nearest_similarity_index(similarities, t: float) -> int:
    """Index of the similarity closest to t; ties go to the lowest index."""
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.size == 0:
        raise DataError("no candidates")
    return int(np.argmin(np.abs(sims - t)))


def _interior_centers(dims, stride: int) -> np.ndarray:
    axes = [np.arange(PATCH_RADIUS, n - PATCH_RADIUS, stride) for n in dims]
    if any(a.size == 0 for a in axes):
        raise DataError("no interior candidates: volume smaller than "
                        f"{PATCH_SIDE}^3")
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def _resolve_side(gradient_side, rng) -> int:
    if gradient_side == "auto":
        return int(rng.integers(0, 2))
    if gradient_side in (GRAD_FROM_MOVING, "moving"):
        return GRAD_FROM_MOVING
    if gradient_side in (GRAD_FROM_FIXED, "fixed"):
        return GRAD_FROM_FIXED
    raise DataError(f"unknown gradient side {gradient_side!r}")


def pair_similarity(moving: Volume, fixed: Volume, grad: Volume, side: int,
                    center_m, center_f) -> float:
    """Multi-radius LC2 between cubes at independent centers of two volumes.

    The regression direction follows ``side``: the flagged volume provides
    the intensity and gradient columns, the other the values being fitted.
    """
    vals = []
    for r in LC2_RADII:
        pm = extract_patch(moving, center_m, r)
        pf = extract_patch(fixed, center_f, r)
        if side == GRAD_FROM_MOVING:
            vals.append(lc2_patch(pf, pm, extract_patch(grad, center_m, r)))
        else:
            vals.append(lc2_patch(pm, pf, extract_patch(grad, center_f, r)))
    return float(np.mean(vals))


def sample_pairs(moving: Volume, fixed: Volume, n: int = 5000,
                 candidate_stride: int = 2, seed: int = 0,
                 gradient_side="auto") -> SampleRun:
    """Draw n patch-pair records from one co-registered volume pair.

    Per record: a moving-volume center drawn with probability proportional
    to its local-variance weight, a uniform target similarity t, and the
    fixed-volume candidate (stride grid over the interior) whose LC2 against
    the drawn patch is closest to t. All randomness comes from ``seed``; the
    column side of the LC2 fit is coin-flipped per call unless forced.
    """
    if n < 1:
        raise DataError("need at least one record")
    centers_m = _interior_centers(moving.dims, 1)
    candidates = _interior_centers(fixed.dims, max(1, int(candidate_stride)))
    wvol = weight_map(moving).volume.data
    w = wvol[centers_m[:, 2], centers_m[:, 1], centers_m[:, 0]]
    rng = np.random.default_rng(seed)
    side = _resolve_side(gradient_side, rng)
    grad = gradient_magnitude(moving if side == GRAD_FROM_MOVING else fixed)
    picks = weighted_draws(w, rng, n)
    ts = rng.uniform(0.0, 1.0, n)
    shape = (PATCH_SIDE,) * 3
    records = []
    for k in range(n):
        cm = centers_m[picks[k]]
        sims = np.array([pair_similarity(moving, fixed, grad, side, cm, cf)
                         for cf in candidates])
        j = nearest_similarity_index(sims, ts[k])
        records.append(PatchPairRecord(
            extract_patch(moving, cm, PATCH_RADIUS).data.reshape(shape),
            extract_patch(fixed, candidates[j], PATCH_RADIUS).data.reshape(shape),
            sims[j]))
    return SampleRun(tuple(records), side)


def write_dataset(records, path, gradient_side=None) -> None:
    """Serialize records to a DISAP1 file (raw little-endian f32 payload)."""
    if gradient_side is None:
        gradient_side = getattr(records, "gradient_side", GRAD_FROM_MOVING)
    recs = tuple(records)
    if not recs:
        raise DataError("no records to write")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HEADER_FMT, DISAP1_MAGIC, len(recs), PATCH_SIDE,
                             gradient_side))
        for r in recs:
            fh.write(r.patch_m.tobytes())
            fh.write(r.patch_f.tobytes())
            fh.write(struct.pack("<f", r.target))


def read_dataset(path) -> SampleRun:
    """Read a DISAP1 file back into records; bit-exact round trip."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize(_HEADER_FMT)
    if len(raw) < head:
        raise DataError("dataset file truncated")
    magic, count, side, grad_side = struct.unpack_from(_HEADER_FMT, raw)
    if magic != DISAP1_MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if side != PATCH_SIDE:
        raise DataError(f"unsupported patch side {side}")
    rec_bytes = (2 * side ** 3 + 1) * 4
    if len(raw) != head + count * rec_bytes:
        raise DataError(f"payload size {len(raw) - head} != {count} records")
    shape = (side,) * 3
    records = []
    for k in range(count):
        off = head + k * rec_bytes
        cube = side ** 3
        pm = np.frombuffer(raw, dtype="<f4", count=cube, offset=off)
        pf = np.frombuffer(raw, dtype="<f4", count=cube, offset=off + cube * 4)
        (target,) = struct.unpack_from("<f", raw, off + 2 * cube * 4)
        records.append(PatchPairRecord(pm.reshape(shape), pf.reshape(shape),
                                       target))
    return SampleRun(tuple(records), grad_side)
