"""Descriptor feature maps, int8 quantization, and the dot-product objective.

A FeatureMap is a stride-4 (by default) grid of 16-channel descriptors with
norms clipped at 1, produced once per volume by the CNN. Registration then
maximizes the weighted mean dot product between fixed-cell descriptors and
trilinearly interpolated moving descriptors; the spatial gradient of that
interpolation gives analytic parameter gradients without touching the CNN.

Quantized maps store int8 at a fixed global scale of 127 (valid because norms
are clipped); dot products run in integer arithmetic with one final rescale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DataError, NumericalError
from .metrics import WeightMap
from .transform import (TransformChain, apply_point,
                        spatial_to_param_gradient, to_matrix)
from .volume import Volume, _as_geometry

DISAF1_MAGIC = b"DISAF1\x00\x00"
QUANT_SCALE = 127.0
_HEADER_FMT = "<3I2I3I3d3d9dBf"


@dataclass(frozen=True)
class FeatureMap:
    """Multichannel descriptor grid tied to its source volume's geometry.

    data is (nz, ny, nx, channels), float32 or int8 (scale 127). Cell i sits
    at source voxel index stride*i + (stride-1)/2, so cell centers inherit the
    source world mapping.
    """

    data: np.ndarray
    stride: int
    source_dims: tuple[int, int, int]
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.dtype not in (np.float32, np.int8):
            raise DataError(f"feature storage must be f32 or i8, got {data.dtype}")
        if data.ndim != 4:
            raise DataError("feature data must be (nz, ny, nx, channels)")
        if self.stride < 1:
            raise DataError("stride must be >= 1")
        spacing, origin, direction = _as_geometry(self.spacing, self.origin, self.direction)
        # rounding a clipped descriptor to i8 can lift its norm by up to
        # sqrt(channels)*0.5/127, so allow a uniform 2% margin over 1
        norms = np.linalg.norm(self.descriptor_array(data), axis=-1)
        if norms.size and norms.max() > 1.02:
            raise DataError(f"descriptor norm {norms.max():.4f} exceeds 1.02")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "source_dims", tuple(int(d) for d in self.source_dims))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @staticmethod
    def descriptor_array(data: np.ndarray) -> np.ndarray:
        if data.dtype == np.int8:
            return data.astype(np.float32) / QUANT_SCALE
        return data

    @property
    def dims(self) -> tuple[int, int, int]:
        """Cell grid size as (nx, ny, nz)."""
        nz, ny, nx, _ = self.data.shape
        return (nx, ny, nz)

    @property
    def n_channels(self) -> int:
        return self.data.shape[3]

    @property
    def is_quantized(self) -> bool:
        return self.data.dtype == np.int8

    @property
    def scale(self) -> float:
        return QUANT_SCALE if self.is_quantized else 1.0

    def cell_world(self, cells) -> np.ndarray:
        """World mm of cell centers; cells are (...,3) fractional (x,y,z)."""
        cells = np.asarray(cells, dtype=np.float64)
        src = cells * self.stride + (self.stride - 1) / 2.0
        return (src * self.spacing) @ self.direction.T + self.origin

    def world_to_cell(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        src = ((pts - self.origin) @ self.direction) / self.spacing
        return (src - (self.stride - 1) / 2.0) / self.stride

    def grid_volume(self) -> Volume:
        """Empty Volume carrying the feature-cell grid geometry."""
        nx, ny, nz = self.dims
        eff = self.spacing * self.stride
        origin = self.origin + self.direction @ (self.spacing * (self.stride - 1) / 2.0)
        return Volume(np.zeros((nz, ny, nx), dtype=np.float32), eff, origin, self.direction)

    def descriptors_f32(self) -> np.ndarray:
        return self.descriptor_array(self.data)

    def cell_descriptor(self, cell) -> np.ndarray:
        cx, cy, cz = (int(c) for c in cell)
        nx, ny, nz = self.dims
        if not (0 <= cx < nx and 0 <= cy < ny and 0 <= cz < nz):
            raise DataError(f"cell index {cell} out of bounds {self.dims}")
        return self.descriptor_array(self.data[cz, cy, cx])


def quantize(f: FeatureMap) -> FeatureMap:
    """Round components to int8 at scale 127; requires norm-clipped input."""
    if f.is_quantized:
        return f
    if np.abs(f.data).max(initial=0.0) > 1.001:
        raise DataError("unclipped features")
    q = np.clip(np.rint(f.data.astype(np.float64) * QUANT_SCALE), -127, 127).astype(np.int8)
    return FeatureMap(q, f.stride, f.source_dims, f.spacing, f.origin, f.direction)


def dequantize(f: FeatureMap) -> FeatureMap:
    if not f.is_quantized:
        return f
    return FeatureMap(f.descriptors_f32().copy(), f.stride, f.source_dims,
                      f.spacing, f.origin, f.direction)


# ---- DISAF1 container --------------------------------------------------------


def save_features(f: FeatureMap, path) -> None:
    nx, ny, nz = f.dims
    storage = 1 if f.is_quantized else 0
    header = DISAF1_MAGIC + struct.pack(
        _HEADER_FMT, nx, ny, nz, f.n_channels, f.stride, *f.source_dims,
        *f.spacing, *f.origin, *f.direction.ravel(), storage, f.scale)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.data).tobytes())


def load_features(path) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:8] != DISAF1_MAGIC:
        raise DataError("not a DISAF1 file (bad magic)")
    hdr_size = 8 + struct.calcsize(_HEADER_FMT)
    if len(blob) < hdr_size:
        raise DataError("truncated file")
    vals = struct.unpack(_HEADER_FMT, blob[8:hdr_size])
    nx, ny, nz, channels, stride = vals[:5]
    source_dims = vals[5:8]
    spacing = np.array(vals[8:11])
    origin = np.array(vals[11:14])
    direction = np.array(vals[14:23]).reshape(3, 3)
    storage, scale = vals[23], vals[24]
    if storage not in (0, 1):
        raise DataError(f"unknown storage tag {storage}")
    dtype = np.int8 if storage == 1 else np.dtype("<f4")
    count = nx * ny * nz * channels
    itemsize = 1 if storage == 1 else 4
    if len(blob) < hdr_size + count * itemsize:
        raise DataError("truncated file")
    data = np.frombuffer(blob[hdr_size:hdr_size + count * itemsize], dtype=dtype)
    data = data.reshape(nz, ny, nx, channels)
    if storage == 1 and abs(scale - QUANT_SCALE) > 1e-6:
        raise DataError(f"unsupported quantization scale {scale}")
    return FeatureMap(data.astype(np.float32) if storage == 0 else data,
                      stride, source_dims, spacing, origin, direction)


# ---- weights on the feature grid ---------------------------------------------


def resample_weights_to_feature_grid(w: WeightMap, f: FeatureMap) -> WeightMap:
    """Block-mean the voxel weights into stride-sized cells (ragged edges use
    the in-bounds voxels only)."""
    src = w.volume
    if src.dims != f.source_dims:
        raise DataError("weight map does not match the feature map's source grid")
    if not (np.allclose(src.spacing, f.spacing) and np.allclose(src.origin, f.origin)
            and np.allclose(src.direction, f.direction)):
        raise DataError("weight map geometry mismatch")
    s = f.stride
    data = src.data.astype(np.float64)
    counts = np.ones_like(data)
    for axis, n_cells in zip((0, 1, 2), f.dims[::-1]):
        edges = np.arange(0, data.shape[axis], s)
        if len(edges) != n_cells:
            raise DataError("feature dims inconsistent with source dims and stride")
        data = np.add.reduceat(data, edges, axis=axis)
        counts = np.add.reduceat(counts, edges, axis=axis)
    mean = (data / counts).astype(np.float32)
    vol = Volume(mean, f.grid_volume().spacing, f.grid_volume().origin, f.direction)
    return WeightMap(vol, float(mean.sum(dtype=np.float64)))


def default_samples(f: FeatureMap, weights: WeightMap, max_samples: int = 32768,
                    seed: int = 0) -> np.ndarray:
    """All cells with positive weight, seeded-subsampled down to max_samples."""
    wd = weights.volume.data
    if wd.shape != f.data.shape[:3]:
        raise DataError("weights not on the feature grid")
    zz, yy, xx = np.nonzero(wd > 0)
    cells = np.stack([xx, yy, zz], axis=1).astype(np.int64)
    if cells.shape[0] == 0:
        raise NumericalError("weight map is zero everywhere")
    if cells.shape[0] > max_samples:
        rng = np.random.default_rng(seed)
        pick = rng.choice(cells.shape[0], size=max_samples, replace=False)
        cells = cells[np.sort(pick)]
    return cells


# ---- the objective -----------------------------------------------------------


class DotObjective:
    """Reusable evaluator: fixed-side data is gathered once, every call only
    maps sample points and interpolates the moving grid."""

    def __init__(self, f_fixed: FeatureMap, f_moving: FeatureMap,
                 weights: WeightMap, samples):
        if f_fixed.n_channels != f_moving.n_channels:
            raise DataError("channel count mismatch")
        samples = np.asarray(samples, dtype=np.int64).reshape(-1, 3)
        if samples.shape[0] == 0:
            raise DataError("empty sample set")
        nx, ny, nz = f_fixed.dims
        if (np.any(samples < 0) or np.any(samples[:, 0] >= nx)
                or np.any(samples[:, 1] >= ny) or np.any(samples[:, 2] >= nz)):
            raise DataError("sample cell out of bounds")
        if not weights.volume.same_grid(f_fixed.grid_volume()):
            raise DataError("weights not on the fixed feature grid")
        self.quantized = f_fixed.is_quantized and f_moving.is_quantized
        sx, sy, sz = samples[:, 0], samples[:, 1], samples[:, 2]
        if self.quantized:
            self._fdesc = np.ascontiguousarray(f_fixed.data[sz, sy, sx])
            self._mdata = f_moving.data
            self._rescale = 1.0 / (QUANT_SCALE * QUANT_SCALE)
        else:
            self._fdesc = np.ascontiguousarray(f_fixed.descriptors_f32()[sz, sy, sx])
            self._mdata = f_moving.descriptors_f32()
            self._rescale = 1.0
        # gradient path always runs on dequantized f32 data
        self._fdesc_f = (self._fdesc.astype(np.float32) / QUANT_SCALE
                         if self.quantized else self._fdesc)
        self._mdata_f = None if self.quantized else self._mdata
        self._moving = f_moving
        self._world = np.ascontiguousarray(f_fixed.cell_world(samples))
        self._w = weights.volume.data[sz, sy, sx].astype(np.float64)
        self._mdim = np.array(f_moving.dims, dtype=np.float64) - 1.0
        self.n_samples = samples.shape[0]
        # static world -> moving-cell affine, composed with the pose per call
        eff = f_moving.spacing * f_moving.stride
        self._cmap = f_moving.direction.T / eff[:, None]
        self._c0 = (-self._cmap @ f_moving.origin
                    - (f_moving.stride - 1) / (2.0 * f_moving.stride))

    def _cells(self, chain: TransformChain):
        pts = apply_point(chain, self._world)
        cells = self._moving.world_to_cell(pts)
        inside = np.all((cells >= 0.0) & (cells <= self._mdim), axis=1)
        return cells, inside.astype(np.uint8)

    def value(self, chain: TransformChain) -> float:
        if chain.deform is None:
            H = to_matrix(chain)
            M = self._cmap @ H[:3, :3]
            t = self._cmap @ H[:3, 3] + self._c0
            kern = _kernels.dot_affine_i8 if self.quantized else _kernels.dot_affine_f32
            num, den = kern(self._mdata, self._world,
                            M[0, 0], M[0, 1], M[0, 2],
                            M[1, 0], M[1, 1], M[1, 2],
                            M[2, 0], M[2, 1], M[2, 2],
                            t[0], t[1], t[2], self._fdesc, self._w)
        else:
            cells, inside = self._cells(chain)
            if self.quantized:
                num, den = _kernels.dot_accumulate_i8(
                    self._mdata, cells[:, 0], cells[:, 1], cells[:, 2], inside,
                    self._fdesc, self._w)
            else:
                num, den = _kernels.dot_accumulate_f32(
                    self._mdata, cells[:, 0], cells[:, 1], cells[:, 2], inside,
                    self._fdesc, self._w)
        if self.quantized:
            num *= self._rescale
        if den <= 0.0:
            raise NumericalError("no overlap")
        return num / den

    def value_and_grad(self, chain: TransformChain):
        if self._mdata_f is None:
            self._mdata_f = self._moving.descriptors_f32()
        cells, inside = self._cells(chain)
        gcell = np.empty((self.n_samples, 3))
        num, den = _kernels.dot_accumulate_grad_f32(
            self._mdata_f, cells[:, 0], cells[:, 1], cells[:, 2], inside,
            self._fdesc_f, self._w, gcell)
        if den <= 0.0:
            raise NumericalError("no overlap")
        eff = self._moving.spacing * self._moving.stride
        gworld = (gcell / eff) @ self._moving.direction.T
        grad = spatial_to_param_gradient(chain, self._world, gworld, weights=self._w)
        return num / den, grad / den


def dot_objective(f_fixed: FeatureMap, f_moving: FeatureMap, chain: TransformChain,
                  weights: WeightMap, samples) -> float:
    """Weighted mean descriptor dot product; out-of-overlap samples drop out
    of numerator and denominator alike."""
    return DotObjective(f_fixed, f_moving, weights, samples).value(chain)


def dot_objective_gradient(f_fixed: FeatureMap, f_moving: FeatureMap,
                           chain: TransformChain, weights: WeightMap, samples):
    """(value, d value / d transform parameters)."""
    return DotObjective(f_fixed, f_moving, weights, samples).value_and_grad(chain)


def heatmap(f_src: FeatureMap, cell, f_tgt: FeatureMap) -> Volume:
    """Dot product of one source descriptor against every target cell."""
    query = f_src.cell_descriptor(cell).astype(np.float32)
    vals = np.tensordot(f_tgt.descriptors_f32(), query, axes=([3], [0]))
    grid = f_tgt.grid_volume()
    return grid.with_data(vals.astype(np.float32))
