"""Label-preserving augmentation for patch pairs.

A rotation shared by both patches permutes their voxels identically, so
the stored similarity carries over exactly; per-patch sign flips and
affine intensity maps are invariances of the similarity as well. The
default rotation pool is the 24 axis-aligned cube orientations (no
resampling); an optional small-angle wobble resamples trilinearly and is
off by default because interpolation perturbs the stored target.
"""

from __future__ import annotations

from functools import lru_cache
from itertools import permutations, product

import numpy as np

N_ROTATIONS = 24


def rotation_matrices() -> np.ndarray:
    """The 24 right-handed signed permutation matrices, fixed order.

    Index 0 is the identity. Entries act on (x, y, z) coordinate columns.
    """
    mats = []
    for perm in permutations(range(3)):
        for signs in product((1, -1), repeat=3):
            m = np.zeros((3, 3), dtype=np.int64)
            for row, (col, s) in enumerate(zip(perm, signs)):
                m[row, col] = s
            if round(np.linalg.det(m)) == 1:
                mats.append(m)
    return np.stack(mats)


@lru_cache(maxsize=None)
def _gather_tables(side: int) -> np.ndarray:
    """Per rotation, flat indices with rotated.ravel() = cube.ravel()[table]."""
    mats = rotation_matrices()
    c = (side - 1) / 2.0
    zz, yy, xx = np.meshgrid(*[np.arange(side)] * 3, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3) - c
    tables = np.empty((N_ROTATIONS, side ** 3), dtype=np.intp)
    for k, m in enumerate(mats):
        # out(p) = in(R^T (p - c) + c); row vectors make R^T p into p @ R
        src = pts @ m + c
        sx, sy, sz = np.rint(src).astype(np.intp).T
        tables[k] = (sz * side + sy) * side + sx
    return tables


def rotate_cube(cube: np.ndarray, k: int) -> np.ndarray:
    """Rotation k of a cubic array about its center; 0 is the identity."""
    side = cube.shape[0]
    if cube.shape != (side, side, side):
        raise ValueError(f"not a cube: {cube.shape}")
    if not 0 <= k < N_ROTATIONS:
        raise ValueError(f"rotation index {k} outside 0..{N_ROTATIONS - 1}")
    table = _gather_tables(side)[k]
    return cube.reshape(-1)[table].reshape(cube.shape)


def apply_draw(record, k: int, gain_m: float, offset_m: float,
               gain_f: float, offset_f: float):
    """Deterministic augmentation: one shared rotation index plus per-patch
    intensity maps gain * I + offset (sign flips fold into the gains)."""
    pm = np.float32(gain_m) * rotate_cube(record.patch_m, k) + np.float32(offset_m)
    pf = np.float32(gain_f) * rotate_cube(record.patch_f, k) + np.float32(offset_f)
    return type(record)(pm, pf, record.target)


def _resample_rotate(cube: np.ndarray, angles) -> np.ndarray:
    """Trilinear resample after a rotation about the cube center (zero
    outside). Unlike the exact 24 this perturbs values; callers opt in."""
    side = cube.shape[0]
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    rot = rz @ ry @ rx
    c = (side - 1) / 2.0
    zz, yy, xx = np.meshgrid(*[np.arange(side)] * 3, indexing="ij")
    src = np.stack([xx, yy, zz], -1).reshape(-1, 3) - c
    src = src @ rot + c
    lo = np.floor(src).astype(np.int64)
    f = src - lo
    acc = np.zeros(side ** 3)
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                ix, iy, iz = lo[:, 0] + dx, lo[:, 1] + dy, lo[:, 2] + dz
                ok = ((ix >= 0) & (ix < side) & (iy >= 0) & (iy < side)
                      & (iz >= 0) & (iz < side))
                vals = np.zeros(side ** 3)
                vals[ok] = cube[iz[ok], iy[ok], ix[ok]]
                acc += wx * wy * wz * vals
    return acc.reshape(cube.shape).astype(np.float32)


def augment(record, rng, *, rotate: bool = True, intensity: bool = True,
            small_angle: float = 0.0):
    """Random label-preserving variant of a record.

    Draw order is fixed: rotation index, then per-patch (sign, gain,
    offset), then the optional shared wobble angles. The target is copied
    through untouched, never recomputed.
    """
    rng = np.random.default_rng(rng)
    k = int(rng.integers(0, N_ROTATIONS)) if rotate else 0
    gm = gf = 1.0
    om = of = 0.0
    if intensity:
        signs = rng.integers(0, 2, size=2) * 2 - 1
        gains = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=2))
        offs = rng.uniform(-0.5, 0.5, size=2)
        gm, gf = float(signs[0] * gains[0]), float(signs[1] * gains[1])
        om, of = float(offs[0]), float(offs[1])
    out = apply_draw(record, k, gm, om, gf, of)
    if small_angle > 0.0:
        ang = rng.normal(0.0, small_angle, size=3)
        out = type(record)(_resample_rotate(out.patch_m, ang),
                           _resample_rotate(out.patch_f, ang), out.target)
    return out
