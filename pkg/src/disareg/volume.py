"""3D scalar volumes with world-coordinate geometry.

A Volume couples a dense float32 grid with its physical placement: spacing in
mm/voxel, world origin of the (0,0,0) voxel center, and an orthonormal 3x3
direction matrix. Voxel data is stored C-contiguous with shape (nz, ny, nx),
i.e. x-fastest in memory; ``dims`` reports logical (nx, ny, nz).

File formats: NIfTI-1 (.nii / .nii.gz) and the internal "DISAV1" container
(8-byte magic, little-endian header, raw f32 payload) which round-trips
bit-exactly.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, NumericalError

DISAV1_MAGIC = b"DISAV1\x00\x00"

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64, 512: np.uint16}
_NIFTI_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16,
                np.dtype(np.float64): 64, np.dtype(np.uint16): 512}


def _as_geometry(spacing, origin, direction):
    spacing = np.asarray(spacing, dtype=np.float64).reshape(3).copy()
    origin = np.asarray(origin, dtype=np.float64).reshape(3).copy()
    direction = np.asarray(direction, dtype=np.float64).reshape(3, 3).copy()
    if np.any(spacing <= 0):
        raise DataError(f"spacing must be positive, got {spacing}")
    if np.abs(direction.T @ direction - np.eye(3)).max() >= 1e-6:
        raise DataError("direction matrix is not orthonormal")
    return spacing, origin, direction


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar grid with world geometry.

    data      : float32 array, shape (nz, ny, nx), read-only
    spacing   : (sx, sy, sz) mm per voxel
    origin    : world mm of the center of voxel (0, 0, 0)
    direction : orthonormal 3x3; column a is the world direction of grid axis a
    """

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise DataError(f"volume data must be 3D, got shape {data.shape}")
        spacing, origin, direction = _as_geometry(self.spacing, self.origin, self.direction)
        data.flags.writeable = False
        for name, val in (("data", data), ("spacing", spacing),
                          ("origin", origin), ("direction", direction)):
            object.__setattr__(self, name, val)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Grid size as (nx, ny, nz)."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def n_voxels(self) -> int:
        return self.data.size

    def value_at(self, ix: int, iy: int, iz: int) -> float:
        return float(self.data[iz, iy, ix])

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new voxel values (shape must match)."""
        if data.shape != self.data.shape:
            raise DataError("with_data shape mismatch")
        return Volume(data, self.spacing, self.origin, self.direction)

    def same_grid(self, other: "Volume", tol: float = 1e-9) -> bool:
        return (self.data.shape == other.data.shape
                and np.allclose(self.spacing, other.spacing, atol=tol)
                and np.allclose(self.origin, other.origin, atol=tol)
                and np.allclose(self.direction, other.direction, atol=tol))

    # ---- index <-> world ----------------------------------------------------

    def world_from_index(self, idx) -> np.ndarray:
        """Map (...,3) fractional voxel indices (x,y,z order) to world mm."""
        idx = np.asarray(idx, dtype=np.float64)
        return (idx * self.spacing) @ self.direction.T + self.origin

    def index_from_world(self, pts) -> np.ndarray:
        """Map (...,3) world points to fractional voxel indices (x,y,z order)."""
        pts = np.asarray(pts, dtype=np.float64)
        return ((pts - self.origin) @ self.direction) / self.spacing


@dataclass(frozen=True)
class Patch:
    """Cubic neighborhood copied out of a volume, x-fastest flat order."""

    radius: int
    data: np.ndarray
    center_index: tuple[int, int, int]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32).ravel()
        side = 2 * self.radius + 1
        if data.size != side ** 3:
            raise DataError(f"patch data length {data.size} != {side}^3")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    def as_array(self) -> np.ndarray:
        """View shaped (side, side, side), indexed [z, y, x]."""
        s = self.side
        return self.data.reshape(s, s, s)


# ---- elementary grid operations ---------------------------------------------


def normalize(v: Volume) -> Volume:
    """Shift/scale to zero mean and unit standard deviation."""
    if v.n_voxels < 2:
        raise DataError("normalize needs at least 2 voxels")
    data = v.data.astype(np.float64)
    std = data.std()
    if std <= 1e-12:
        raise NumericalError("constant volume")
    return v.with_data(((data - data.mean()) / std).astype(np.float32))


def resample(v: Volume, new_spacing) -> Volume:
    """Resample onto a grid with the given spacing covering the same extent.

    New dims are ceil(dim * spacing / new_spacing); voxel edges are aligned at
    the low corner and values come from trilinear interpolation with
    nearest-edge clamping outside the source grid.
    """
    new_spacing = np.asarray(new_spacing, dtype=np.float64).reshape(3)
    if np.any(new_spacing <= 0):
        raise DataError("new_spacing must be positive")
    dims = np.array(v.dims)
    new_dims = np.maximum(1, np.ceil(dims * v.spacing / new_spacing - 1e-9).astype(int))
    # new voxel i center sits at old fractional index (new_s*i + (new_s-s)/2)/s
    axes = [(new_spacing[a] * np.arange(new_dims[a]) + 0.5 * (new_spacing[a] - v.spacing[a]))
            / v.spacing[a] for a in range(3)]
    iz, iy, ix = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    vals = _trilinear_indices_clamped(v.data, ix, iy, iz)
    new_origin = v.origin + v.direction @ (0.5 * (new_spacing - v.spacing))
    return Volume(vals.astype(np.float32), new_spacing, new_origin, v.direction)


def gradient_magnitude(v: Volume) -> Volume:
    """Per-voxel L2 norm of the spatial gradient (mm^-1 scaling).

    Central differences over 2*spacing in the interior, one-sided on the
    boundary faces.
    """
    if min(v.dims) < 3:
        raise DataError("gradient_magnitude needs dims >= 3 per axis")
    sx, sy, sz = v.spacing
    gz, gy, gx = np.gradient(v.data.astype(np.float64), sz, sy, sx, edge_order=1)
    return v.with_data(np.sqrt(gx * gx + gy * gy + gz * gz).astype(np.float32))


def _trilinear_indices_clamped(data: np.ndarray, ix, iy, iz) -> np.ndarray:
    """Trilinear interpolation at fractional indices, clamped to the grid."""
    nz, ny, nx = data.shape
    ix = np.clip(ix, 0.0, nx - 1.0)
    iy = np.clip(iy, 0.0, ny - 1.0)
    iz = np.clip(iz, 0.0, nz - 1.0)
    x0 = np.minimum(np.floor(ix).astype(np.int64), nx - 2 if nx > 1 else 0)
    y0 = np.minimum(np.floor(iy).astype(np.int64), ny - 2 if ny > 1 else 0)
    z0 = np.minimum(np.floor(iz).astype(np.int64), nz - 2 if nz > 1 else 0)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    z0 = np.maximum(z0, 0)
    fx, fy, fz = ix - x0, iy - y0, iz - z0
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    d = data
    c000 = d[z0, y0, x0]; c100 = d[z0, y0, x1]
    c010 = d[z0, y1, x0]; c110 = d[z0, y1, x1]
    c001 = d[z1, y0, x0]; c101 = d[z1, y0, x1]
    c011 = d[z1, y1, x0]; c111 = d[z1, y1, x1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def sample_trilinear(v: Volume, points, mode: str = "flag"):
    """Sample world points by trilinear interpolation.

    Returns (values, inside). ``inside`` marks points whose fractional index
    lies in [0, dim-1] on every axis. With mode="flag" (default) outside
    values are 0 and must be discounted by the caller; with mode="clamp" they
    come from the nearest-edge clamped position.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    idx = v.index_from_world(pts.reshape(-1, 3))
    nx, ny, nz = v.dims
    lim = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
    inside = np.all((idx >= 0.0) & (idx <= lim), axis=1)
    vals = _trilinear_indices_clamped(v.data, idx[:, 0], idx[:, 1], idx[:, 2])
    if mode == "flag":
        vals = np.where(inside, vals, 0.0)
    elif mode != "clamp":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if single:
        return float(vals[0]), bool(inside[0])
    return vals, inside


def extract_patch(v: Volume, center_index, radius: int) -> Patch:
    """Copy the (2r+1)^3 cube around a voxel; the cube must be fully inside."""
    cx, cy, cz = (int(c) for c in center_index)
    r = int(radius)
    nx, ny, nz = v.dims
    if r < 0:
        raise DataError("radius must be >= 0")
    if not (r <= cx < nx - r and r <= cy < ny - r and r <= cz < nz - r):
        raise DataError(f"patch cube at {center_index} radius {r} out of bounds")
    cube = v.data[cz - r:cz + r + 1, cy - r:cy + r + 1, cx - r:cx + r + 1]
    return Patch(r, cube.ravel(), (cx, cy, cz))


def local_variance(v: Volume, radius: int) -> Volume:
    """Unbiased variance over the (2r+1)^3 edge-clamped neighborhood of each voxel.

    Separable box sums of I and I^2 (float64 accumulation).
    """
    if radius < 1:
        raise DataError("local_variance radius must be >= 1")
    size = 2 * radius + 1
    n = size ** 3
    data = v.data.astype(np.float64)
    m1 = ndimage.uniform_filter(data, size=size, mode="nearest")
    m2 = ndimage.uniform_filter(data * data, size=size, mode="nearest")
    var = np.clip(m2 - m1 * m1, 0.0, None) * (n / (n - 1))
    return v.with_data(var.astype(np.float32))


# ---- file I/O ----------------------------------------------------------------


def save_volume(v: Volume, path) -> None:
    """Write the internal DISAV1 container (exact f32 round-trip)."""
    nx, ny, nz = v.dims
    header = DISAV1_MAGIC + struct.pack(
        "<3I3d3d9d", nx, ny, nz, *v.spacing, *v.origin, *v.direction.ravel())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(v.data.astype("<f4").tobytes())


def load_volume(path) -> Volume:
    """Read a DISAV1 container."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:8] != DISAV1_MAGIC:
        raise DataError("not a DISAV1 file (bad magic)")
    hdr_size = 8 + struct.calcsize("<3I3d3d9d")
    if len(blob) < hdr_size:
        raise DataError("truncated file")
    fields = struct.unpack("<3I3d3d9d", blob[8:hdr_size])
    nx, ny, nz = fields[:3]
    spacing = np.array(fields[3:6])
    origin = np.array(fields[6:9])
    direction = np.array(fields[9:18]).reshape(3, 3)
    count = nx * ny * nz
    raw = blob[hdr_size:]
    if len(raw) < 4 * count:
        raise DataError("truncated file")
    data = np.frombuffer(raw[:4 * count], dtype="<f4").reshape(nz, ny, nx)
    return Volume(data, spacing, origin, direction)


def _nifti_open(path, mode="rb"):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def load_nifti(path) -> Volume:
    """Read a NIfTI-1 volume (.nii or .nii.gz).

    Geometry priority: sform when sform_code > 0, else qform when
    qform_code > 0, else identity direction with pixdim spacing. Values are
    converted to float32 with scl_slope / scl_inter applied.
    """
    with _nifti_open(path) as fh:
        blob = fh.read()
    if len(blob) < 352:
        raise DataError("malformed header: file shorter than a NIfTI-1 header")
    sizeof_hdr = struct.unpack("<i", blob[:4])[0]
    if sizeof_hdr != 348:
        raise DataError("malformed header: sizeof_hdr != 348 (big-endian unsupported)")
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise DataError("malformed header: bad magic")
    dim = struct.unpack("<8h", blob[40:56])
    if dim[0] != 3:
        raise DataError(f"only 3D volumes supported, dim[0] = {dim[0]}")
    datatype, _bitpix = struct.unpack("<2h", blob[70:74])
    if datatype not in _NIFTI_DTYPES:
        raise DataError(f"unsupported datatype code {datatype}")
    pixdim = struct.unpack("<8f", blob[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack("<3f", blob[108:120])
    qform_code, sform_code = struct.unpack("<2h", blob[252:256])

    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise DataError("malformed header: non-positive dims")
    spacing = np.array([abs(pixdim[1]) or 1.0, abs(pixdim[2]) or 1.0, abs(pixdim[3]) or 1.0])

    if sform_code > 0:
        srow = np.array(struct.unpack("<12f", blob[280:328]), dtype=np.float64).reshape(3, 4)
        affine = srow[:, :3]
        origin = srow[:, 3]
        spacing = np.linalg.norm(affine, axis=0)
        if np.any(spacing <= 0):
            raise DataError("malformed header: degenerate sform")
        direction = affine / spacing
    elif qform_code > 0:
        b, c, d = struct.unpack("<3f", blob[256:268])
        qoffset = np.array(struct.unpack("<3f", blob[268:280]), dtype=np.float64)
        a2 = 1.0 - (b * b + c * c + d * d)
        a = np.sqrt(a2) if a2 > 0 else 0.0
        rot = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ])
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        direction = rot.copy()
        direction[:, 2] *= qfac
        origin = qoffset
    else:
        direction = np.eye(3)
        origin = np.zeros(3)

    offset = int(vox_offset) if vox_offset >= 352 else 352
    count = nx * ny * nz
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    need = offset + count * dtype.itemsize
    if len(blob) < need:
        raise DataError("truncated file")
    raw = np.frombuffer(blob[offset:need], dtype=dtype).astype(np.float64)
    slope = scl_slope if (scl_slope != 0.0 and np.isfinite(scl_slope)) else 1.0
    inter = scl_inter if np.isfinite(scl_inter) else 0.0
    data = (raw * slope + inter).astype(np.float32).reshape(nz, ny, nx)
    return Volume(data, spacing, origin, direction)


def save_nifti(v: Volume, path, dtype=np.float32) -> None:
    """Write a NIfTI-1 file (sform geometry, scl identity)."""
    dtype = np.dtype(dtype)
    if dtype not in _NIFTI_CODES:
        raise DataError(f"unsupported save dtype {dtype}")
    nx, ny, nz = v.dims
    affine = v.direction * v.spacing  # column a scaled by spacing[a]
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _NIFTI_CODES[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<4f", hdr, 280, *affine[0], v.origin[0])
    struct.pack_into("<4f", hdr, 296, *affine[1], v.origin[1])
    struct.pack_into("<4f", hdr, 312, *affine[2], v.origin[2])
    hdr[344:348] = b"n+1\x00"
    payload = np.ascontiguousarray(v.data, dtype=dtype).astype(dtype.newbyteorder("<"))
    with _nifti_open(path, "wb") as fh:
        fh.write(bytes(hdr) + b"\x00\x00\x00\x00")  # header + extension flag
        fh.write(payload.tobytes())


def read_any(path) -> Volume:
    """Dispatch on extension: .nii/.nii.gz -> NIfTI, else DISAV1."""
    p = str(path)
    if p.endswith(".nii") or p.endswith(".nii.gz"):
        return load_nifti(p)
    return load_volume(p)


def write_any(v: Volume, path) -> None:
    p = str(path)
    if p.endswith(".nii") or p.endswith(".nii.gz"):
        save_nifti(v, p)
    else:
        save_volume(v, p)
