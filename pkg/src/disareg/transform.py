"""Parametric spatial transforms: rigid, affine, probe-pressure deformation.

All maps are world-in, world-out (mm). A TransformChain is a linear part
(rigid or affine, rotating about a fixed center) optionally followed by a
spherical-compression displacement applied in the output frame:

    T(p) = q + d(q),   q = L(p)

The free parameter vector is 6 (rigid), 12 (affine) or 8 (rigid + the two
deformation parameters); the compression geometry (c, r, R) is configuration,
not optimized.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError
from .volume import Volume, sample_trilinear

RIGID = "rigid"
AFFINE = "affine"
RIGID_PROBE = "rigid+probe"


def _vec3(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(3).copy()


# ---- rotation helpers (intrinsic Z-Y-X Euler, radians) -----------------------


def rotation_matrix(angles) -> np.ndarray:
    """R = Rz(rz) @ Ry(ry) @ Rx(rx) for angles (rx, ry, rz)."""
    rx, ry, rz = angles
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def rotation_matrix_derivatives(angles) -> list[np.ndarray]:
    """dR/drx, dR/dry, dR/drz for the Z-Y-X composition."""
    rx, ry, rz = angles
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return [Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx]


def euler_from_matrix(R: np.ndarray) -> np.ndarray:
    """Inverse of rotation_matrix; gimbal-locked poses resolve with rx = 0."""
    sy = -R[2, 0]
    cy = np.hypot(R[0, 0], R[1, 0])
    ry = np.arctan2(sy, cy)
    if cy > 1e-9:
        rx = np.arctan2(R[2, 1], R[2, 2])
        rz = np.arctan2(R[1, 0], R[0, 0])
    else:
        rx = 0.0
        rz = np.arctan2(-R[0, 1], R[1, 1])
    return np.array([rx, ry, rz])


# ---- parameter blocks --------------------------------------------------------


@dataclass(frozen=True)
class RigidParams:
    """6-DOF pose: intrinsic Z-Y-X Euler angles (rad) and translation (mm).

    ``center`` is the fixed rotation center (world mm), not a free parameter.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _vec3(self.rotation))
        object.__setattr__(self, "translation", _vec3(self.translation))
        object.__setattr__(self, "center", _vec3(self.center))

    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation)


@dataclass(frozen=True)
class AffineParams:
    """12-DOF linear map A(p - center) + center + t; drivers require det(A) > 0."""

    matrix3: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "matrix3",
                           np.asarray(self.matrix3, dtype=np.float64).reshape(3, 3).copy())
        object.__setattr__(self, "translation", _vec3(self.translation))
        object.__setattr__(self, "center", _vec3(self.center))

    def matrix(self) -> np.ndarray:
        return self.matrix3


@dataclass(frozen=True)
class ProbeDeform:
    """Spherical compression pushing points radially away from c.

    alpha in [0,1] scales the displacement, beta in [0,10] sharpens the
    falloff; the push acts between radii r and R (mm) with 0 < r < R.
    """

    center: np.ndarray
    r: float
    R: float
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        if not (0.0 < self.r < self.R):
            raise DataError(f"probe geometry needs 0 < r < R, got r={self.r} R={self.R}")
        if not (0.0 <= self.alpha <= 1.0):
            raise DataError(f"probe alpha must be in [0,1], got {self.alpha}")
        if not (0.0 <= self.beta <= 10.0):
            raise DataError(f"probe beta must be in [0,10], got {self.beta}")


def probe_falloff(x, r: float, R: float):
    """Radial profile f: ramp 10x/(8r), plateau 1 on [0.8r, r], linear decay to R."""
    x = np.asarray(x, dtype=np.float64)
    ramp = 10.0 * x / (8.0 * r)
    decay = 1.0 - (x - r) / (R - r)
    f = np.where(x < 0.8 * r, ramp, np.where(x <= r, 1.0, np.where(x <= R, decay, 0.0)))
    return f


def _probe_falloff_deriv(x, r: float, R: float):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0.8 * r, 10.0 / (8.0 * r),
                    np.where(x <= r, 0.0, np.where(x <= R, -1.0 / (R - r), 0.0)))


def probe_displacement(points, deform: ProbeDeform) -> np.ndarray:
    """Displacement alpha*R*f(|p-c|)^(1+beta) * unit(p-c); zero at p == c."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    rel = pts - deform.center
    dist = np.linalg.norm(rel, axis=1)
    safe = np.maximum(dist, 1e-300)
    f = probe_falloff(dist, deform.r, deform.R)
    mag = deform.alpha * deform.R * f ** (1.0 + deform.beta)
    disp = rel * (mag / safe)[:, None]
    disp[dist == 0.0] = 0.0
    return disp[0] if single else disp


def probe_spatial_jacobian(points, deform: ProbeDeform) -> np.ndarray:
    """d(displacement)/d(point), shape (..., 3, 3); zero where f == 0."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = pts - deform.center
    dist = np.linalg.norm(rel, axis=1)
    safe = np.maximum(dist, 1e-300)
    u = rel / safe[:, None]
    f = probe_falloff(dist, deform.r, deform.R)
    fp = _probe_falloff_deriv(dist, deform.r, deform.R)
    e = 1.0 + deform.beta
    aR = deform.alpha * deform.R
    # d = aR f^e u ; grad = aR [ e f^(e-1) f' u u^T + f^e (I - u u^T)/x ]
    radial = aR * e * np.where(f > 0, f ** (e - 1.0), 0.0) * fp
    tangential = aR * f ** e / safe
    uuT = u[:, :, None] * u[:, None, :]
    eye = np.eye(3)[None, :, :]
    J = radial[:, None, None] * uuT + tangential[:, None, None] * (eye - uuT)
    J[dist == 0.0] = 0.0
    return J


def probe_param_columns(points, deform: ProbeDeform) -> np.ndarray:
    """d(displacement)/d(alpha, beta) at each point, shape (..., 3, 2).

    The beta column is d * ln(f), taken as 0 where f == 0 (the limit).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = pts - deform.center
    dist = np.linalg.norm(rel, axis=1)
    safe = np.maximum(dist, 1e-300)
    u = rel / safe[:, None]
    u[dist == 0.0] = 0.0
    f = probe_falloff(dist, deform.r, deform.R)
    fe = f ** (1.0 + deform.beta)
    col_alpha = deform.R * fe[:, None] * u
    logf = np.where(f > 0, np.log(np.maximum(f, 1e-300)), 0.0)
    col_beta = deform.alpha * deform.R * (fe * logf)[:, None] * u
    return np.stack([col_alpha, col_beta], axis=2)


# ---- the chain ---------------------------------------------------------------


@dataclass(frozen=True)
class TransformChain:
    """Linear map plus optional probe displacement; immutable."""

    mode: str
    linear: RigidParams | AffineParams
    deform: ProbeDeform | None = None

    def __post_init__(self):
        if self.mode not in (RIGID, AFFINE, RIGID_PROBE):
            raise DataError(f"unknown transform mode {self.mode!r}")
        if self.mode == RIGID_PROBE and self.deform is None:
            raise DataError("rigid+probe mode needs a ProbeDeform")
        if self.mode != RIGID_PROBE and self.deform is not None:
            raise DataError(f"mode {self.mode} does not take a deform component")
        if self.mode == AFFINE and not isinstance(self.linear, AffineParams):
            raise DataError("affine mode needs AffineParams")
        if self.mode in (RIGID, RIGID_PROBE) and not isinstance(self.linear, RigidParams):
            raise DataError(f"{self.mode} mode needs RigidParams")

    @property
    def n_params(self) -> int:
        return {RIGID: 6, AFFINE: 12, RIGID_PROBE: 8}[self.mode]

    def params(self) -> np.ndarray:
        """Free-parameter vector: rigid (rx,ry,rz,tx,ty,tz), affine (A row-major, t),
        rigid+probe (rigid 6, alpha, beta)."""
        if self.mode == RIGID:
            return np.concatenate([self.linear.rotation, self.linear.translation])
        if self.mode == AFFINE:
            return np.concatenate([self.linear.matrix3.ravel(), self.linear.translation])
        return np.concatenate([self.linear.rotation, self.linear.translation,
                               [self.deform.alpha, self.deform.beta]])

    def with_params(self, vec) -> "TransformChain":
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != self.n_params:
            raise DataError(f"parameter vector length {vec.size} != {self.n_params} "
                            f"for mode {self.mode}")
        if self.mode == RIGID:
            lin = replace(self.linear, rotation=vec[:3], translation=vec[3:6])
            return TransformChain(RIGID, lin)
        if self.mode == AFFINE:
            lin = replace(self.linear, matrix3=vec[:9].reshape(3, 3), translation=vec[9:12])
            return TransformChain(AFFINE, lin)
        lin = replace(self.linear, rotation=vec[:3], translation=vec[3:6])
        def_ = replace(self.deform, alpha=float(np.clip(vec[6], 0.0, 1.0)),
                       beta=float(np.clip(vec[7], 0.0, 10.0)))
        return TransformChain(RIGID_PROBE, lin, def_)

    def linear_matrix(self) -> np.ndarray:
        return self.linear.matrix()


def identity_transform(mode: str = RIGID, center=(0.0, 0.0, 0.0),
                       deform: ProbeDeform | None = None) -> TransformChain:
    if mode == AFFINE:
        return TransformChain(AFFINE, AffineParams(center=center))
    lin = RigidParams(center=center)
    if mode == RIGID_PROBE:
        return TransformChain(RIGID_PROBE, lin, deform)
    return TransformChain(RIGID, lin)


def apply_linear(chain: TransformChain, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    A = chain.linear_matrix()
    c = chain.linear.center
    return (pts - c) @ A.T + c + chain.linear.translation


def apply_point(chain: TransformChain, points) -> np.ndarray:
    """Map world points through the chain; accepts (3,) or (N,3)."""
    q = apply_linear(chain, points)
    if chain.deform is not None:
        q = q + probe_displacement(q, chain.deform)
    return q


def jacobian_params(chain: TransformChain, point) -> np.ndarray:
    """d T(p) / d alpha, shape (3, n_params), exact chain rule."""
    return jacobian_params_batch(chain, np.asarray(point, dtype=np.float64).reshape(1, 3))[0]


def jacobian_params_batch(chain: TransformChain, points) -> np.ndarray:
    """Per-point parameter Jacobians, shape (N, 3, n_params)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    rel = pts - chain.linear.center
    cols = np.zeros((n, 3, chain.n_params))
    if chain.mode in (RIGID, RIGID_PROBE):
        for k, dR in enumerate(rotation_matrix_derivatives(chain.linear.rotation)):
            cols[:, :, k] = rel @ dR.T
        cols[:, :, 3:6] = np.eye(3)[None, :, :]
    else:  # affine: d q_i / d A_jk = delta_ij * rel_k
        for j in range(3):
            cols[:, j, 3 * j:3 * j + 3] = rel
        cols[:, :, 9:12] = np.eye(3)[None, :, :]
    if chain.deform is not None:
        q = apply_linear(chain, pts)
        Jd = probe_spatial_jacobian(q, chain.deform)
        nlin = 6 if chain.mode == RIGID_PROBE else 12
        cols[:, :, :nlin] = cols[:, :, :nlin] + np.einsum("nij,njk->nik", Jd, cols[:, :, :nlin])
        cols[:, :, nlin:] = probe_param_columns(q, chain.deform)
    return cols


def spatial_to_param_gradient(chain: TransformChain, points, g_spatial,
                              weights=None) -> np.ndarray:
    """Accumulate sum_n w_n * J(p_n)^T g_n without materializing every Jacobian.

    ``g_spatial`` is (N,3) in world mm; the result is the (n_params,) gradient
    contribution used by the registration objectives.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(g_spatial, dtype=np.float64).reshape(-1, 3)
    if weights is not None:
        g = g * np.asarray(weights, dtype=np.float64)[:, None]
    out = np.zeros(chain.n_params)
    rel = pts - chain.linear.center
    if chain.deform is not None:
        q = apply_linear(chain, pts)
        Jd = probe_spatial_jacobian(q, chain.deform)
        # effective spatial gradient seen by the linear part: (I + Jd)^T g
        geff = g + np.einsum("nij,ni->nj", Jd, g)
        pcols = probe_param_columns(q, chain.deform)
        nlin = 6 if chain.mode == RIGID_PROBE else 12
        out[nlin:] = np.einsum("nic,ni->c", pcols, g)
    else:
        geff = g
    if chain.mode in (RIGID, RIGID_PROBE):
        for k, dR in enumerate(rotation_matrix_derivatives(chain.linear.rotation)):
            out[k] = np.sum((rel @ dR.T) * geff)
        out[3:6] = geff.sum(axis=0)
    else:
        for j in range(3):
            out[3 * j:3 * j + 3] = rel.T @ geff[:, j]
        out[9:12] = geff.sum(axis=0)
    return out


def warp_volume(m: Volume, chain: TransformChain, target: Volume,
                fill: float = 0.0, return_mask: bool = False):
    """Resample m through the chain onto the target grid.

    output(p) = m(T(p)) at each target voxel center; outside samples get
    ``fill`` and are reported in the mask when requested.
    """
    nx, ny, nz = target.dims
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    idx = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(np.float64)
    world = target.world_from_index(idx)
    vals, inside = sample_trilinear(m, apply_point(chain, world))
    if fill != 0.0:
        vals = np.where(inside, vals, fill)
    out = Volume(vals.reshape(nz, ny, nx).astype(np.float32),
                 target.spacing, target.origin, target.direction)
    if return_mask:
        return out, inside.reshape(nz, ny, nx)
    return out


def to_matrix(chain: TransformChain) -> np.ndarray:
    """Homogeneous 4x4 of the linear part; rejects chains with a deform."""
    if chain.deform is not None:
        raise DataError("deformation is not matrix-representable")
    A = chain.linear_matrix()
    c = chain.linear.center
    M = np.eye(4)
    M[:3, :3] = A
    M[:3, 3] = c - A @ c + chain.linear.translation
    return M


def from_matrix(M, mode: str = AFFINE) -> TransformChain:
    """Build a chain from a homogeneous matrix (center folded into translation)."""
    M = np.asarray(M, dtype=np.float64).reshape(4, 4)
    A, t = M[:3, :3], M[:3, 3]
    if mode == AFFINE:
        return TransformChain(AFFINE, AffineParams(matrix3=A, translation=t))
    if np.abs(A @ A.T - np.eye(3)).max() > 1e-6 or np.linalg.det(A) <= 0:
        raise DataError("matrix is not a proper rotation; cannot load as rigid")
    return TransformChain(RIGID, RigidParams(rotation=euler_from_matrix(A), translation=t))


def invert_linear(chain: TransformChain) -> TransformChain:
    """Inverse of a linear-only chain (raises if a deform is attached)."""
    M = to_matrix(chain)
    Minv = np.linalg.inv(M)
    return from_matrix(Minv, AFFINE if chain.mode == AFFINE else RIGID)


def compose_linear(outer: TransformChain, inner: TransformChain) -> TransformChain:
    """Linear-only composition outer∘inner as an affine chain."""
    M = to_matrix(outer) @ to_matrix(inner)
    return from_matrix(M, AFFINE)
