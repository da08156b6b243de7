"""Local and global optimization over transform parameters.

Three layers: a BFGS quasi-Newton loop with Armijo backtracking for
objectives that expose analytic gradients, a bound-constrained quadratic
trust-region method for those that do not, and a seeded random-restart
driver over a parameter box. Objectives work on scaled parameters so
radians, millimetres, and deformation knobs optimize at comparable
magnitudes; adaptors for the descriptor dot product, LC2, and the
self-similarity descriptors build the scaling in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import _kernels
from .errors import DataError, NumericalError
from .features import DotObjective, FeatureMap, default_samples, \
    resample_weights_to_feature_grid
from .metrics import MindDescriptor, WeightMap, lc2_global, weight_map
from .transform import AFFINE, RIGID, RIGID_PROBE, ProbeDeform, TransformChain, \
    apply_point, identity_transform, spatial_to_param_gradient
from .volume import Volume, gradient_magnitude

ARMIJO_C1 = 1e-4
STEP_FLOOR = 1e-10
CURVATURE_FLOOR = 1e-12


@dataclass(frozen=True)
class OptimizationResult:
    """Terminal state of one (or one aggregated) optimization run."""

    x: np.ndarray
    value: float
    n_evals: int
    n_grad_evals: int
    converged: bool
    trace: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64).copy())
        if self.n_evals < 1:
            raise DataError("evaluation count must be >= 1")


def bfgs_minimize(fg, x0, max_iters: int = 100, grad_tol: float = 1e-6,
                  max_evals: int | None = None) -> OptimizationResult:
    """Inverse-Hessian BFGS with Armijo backtracking (c1 = 1e-4, halving).

    ``fg`` maps x to (value, gradient). Terminates on gradient norm, a
    backtracked step shorter than 1e-10, the iteration cap, or the optional
    evaluation budget. The curvature update is skipped when s'y <= 1e-12; the
    first accepted update rescales H to (s'y / y'y) I beforehand.
    """
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite start point")
    f, g = fg(x)
    g = np.asarray(g, dtype=np.float64).copy()
    n_evals = 1
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NumericalError("objective not finite at start")
    n = x.size
    H = np.eye(n)
    unscaled = True
    converged = False
    for _ in range(max_iters):
        if np.linalg.norm(g) <= grad_tol:
            converged = True
            break
        if max_evals is not None and n_evals >= max_evals:
            break
        p = -(H @ g)
        gtp = p @ g
        if gtp >= 0.0:
            # H lost positive definiteness numerically: restart from identity
            H = np.eye(n)
            unscaled = True
            p = -g
            gtp = -(g @ g)
        t = 1.0
        accepted = False
        while not (max_evals is not None and n_evals >= max_evals):
            fn, gn = fg(x + t * p)
            n_evals += 1
            if np.isfinite(fn) and fn <= f + ARMIJO_C1 * t * gtp:
                accepted = True
                break
            t *= 0.5
            if t * np.linalg.norm(p) < STEP_FLOOR:
                break
        if not accepted:
            break
        s = t * p
        gn = np.asarray(gn, dtype=np.float64)
        y = gn - g
        sy = s @ y
        if sy > CURVATURE_FLOOR:
            if unscaled:
                H *= sy / (y @ y)
                unscaled = False
            Hy = H @ y
            rho = 1.0 / sy
            H -= rho * (np.outer(s, Hy) + np.outer(Hy, s))
            H += rho * (rho * (y @ Hy) + 1.0) * np.outer(s, s)
        x = x + s
        f, g = fn, gn
    if not converged and np.linalg.norm(g) <= grad_tol:
        converged = True
    return OptimizationResult(x, float(f), n_evals, n_evals, converged)


def _fit_quadratic(pts, vals, xb, delta, n):
    """Least-squares quadratic around xb in delta-normalized coordinates.

    Returns (c, b, Q) for m(x) = c + b'z + z'Qz/2, z = (x - xb)/delta. Falls
    back to a diagonal model while the history cannot pin down cross terms.
    """
    z = (pts - xb) / delta
    m_full = (n + 1) * (n + 2) // 2
    if len(pts) >= m_full:
        iu = np.triu_indices(n)
        cols = [np.ones(len(pts)), *z.T]
        cols.extend(z[:, i] * z[:, j] for i, j in zip(*iu))
        coef, *_ = np.linalg.lstsq(np.stack(cols, axis=1), vals, rcond=None)
        c, b = coef[0], coef[1:n + 1]
        Q = np.zeros((n, n))
        Q[iu] = coef[n + 1:]
        Q = Q + Q.T  # doubles the diagonal, matching the z_i^2 column
    else:
        cols = np.concatenate([np.ones((len(pts), 1)), z, z * z], axis=1)
        coef, *_ = np.linalg.lstsq(cols, vals, rcond=None)
        c, b = coef[0], coef[1:n + 1]
        Q = 2.0 * np.diag(coef[n + 1:])
    return c, b, Q


def derivative_free_minimize(f, x0, lower, upper, rhobeg: float | None = None,
                             rhoend: float = 1e-8,
                             max_evals: int = 200) -> OptimizationResult:
    """Quadratic-surrogate trust-region search without gradients.

    Bootstraps on a 2n+1 stencil, then repeatedly fits a least-squares
    quadratic to the evaluation history, minimizes it inside box + trust
    region, and manages the radius by the usual predicted/actual ratio.
    Every evaluated point lies inside [lower, upper].
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel().copy()
    lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), x0.shape).copy()
    upper = np.broadcast_to(np.asarray(upper, dtype=np.float64), x0.shape).copy()
    if np.any(lower >= upper):
        raise DataError("lower bound must be strictly below upper")
    if np.any(x0 < lower) or np.any(x0 > upper):
        raise DataError("start point outside bounds")
    n = x0.size
    delta = float(rhobeg) if rhobeg is not None else 0.1 * float(np.min(upper - lower))
    delta = min(delta, float(np.min(upper - lower)) / 2.0)

    f0 = float(f(x0))
    n_evals = 1
    if not np.isfinite(f0):
        raise NumericalError("objective not finite at start")
    pts = [x0]
    vals = [f0]
    xb, fb = x0, f0

    def try_eval(cand):
        nonlocal n_evals, xb, fb
        cand = np.clip(cand, lower, upper)
        fc = float(f(cand))
        n_evals += 1
        pts.append(cand)
        vals.append(fc)
        if np.isfinite(fc) and fc < fb:
            xb, fb = cand, fc
        return cand, fc

    for i in range(n):
        for sign in (1.0, -1.0):
            if n_evals >= max_evals:
                break
            room = (upper[i] - x0[i]) if sign > 0 else (x0[i] - lower[i])
            step = sign * min(delta, room)
            if abs(step) < 1e-15:
                continue
            cand = x0.copy()
            cand[i] += step
            try_eval(cand)

    converged = False
    while n_evals < max_evals:
        if delta < rhoend:
            converged = True
            break
        recent = min(len(pts), (n + 1) * (n + 2))
        c, b, Q = _fit_quadratic(np.array(pts[-recent:]), np.array(vals[-recent:]),
                                 xb, delta, n)

        def model_fg(xphys):
            z = (xphys - xb) / delta
            return c + b @ z + 0.5 * z @ Q @ z, (b + Q @ z) / delta

        bounds = list(zip(np.maximum(lower, xb - delta), np.minimum(upper, xb + delta)))
        sol = scipy.optimize.minimize(model_fg, xb, jac=True, method="L-BFGS-B",
                                      bounds=bounds)
        cand = np.clip(sol.x, lower, upper)
        step_len = np.max(np.abs(cand - xb))
        if step_len < 1e-14:
            delta *= 0.5
            continue
        predicted = model_fg(xb)[0] - model_fg(cand)[0]
        incumbent = fb
        cand, fc = try_eval(cand)
        actual = incumbent - fc
        if predicted <= 1e-16:
            ratio = 1.0 if actual > 0 else -1.0
        else:
            ratio = actual / predicted
        if ratio >= 0.7 and step_len >= 0.9 * delta:
            delta *= 2.0
        elif ratio < 0.1:
            delta *= 0.5
    if not converged and delta < rhoend:
        converged = True
    return OptimizationResult(xb, fb, n_evals, 0, converged)


@dataclass(frozen=True)
class SearchRanges:
    """Per-parameter box for random restarts, in scaled parameter units."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64).ravel().copy()
        upper = np.asarray(self.upper, dtype=np.float64).ravel().copy()
        if lower.shape != upper.shape:
            raise DataError("bound shapes differ")
        if np.any(lower >= upper):
            raise DataError("lower bound must be strictly below upper")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def n_params(self) -> int:
        return self.lower.size

    @property
    def half_width(self) -> np.ndarray:
        return (self.upper - self.lower) / 2.0

    def draw(self, rng, n_starts: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, (n_starts, self.n_params))


def global_search(objective, ranges: SearchRanges, n_starts: int = 500,
                  seed: int = 0, per_start_evals: int = 60,
                  keep_trace: bool = False) -> OptimizationResult:
    """Seeded uniform restarts, one capped local run each, strict-min winner.

    All starts are drawn up front so the outcome is a pure function of (seed,
    n_starts, ranges) no matter how runs would be scheduled. Differentiable
    objectives get BFGS, the rest the derivative-free method; restarts whose
    start point has no finite value are charged and skipped. Ties break to
    the lowest restart index via strict improvement.
    """
    if n_starts < 1:
        raise DataError("n_starts must be >= 1")
    value_fn, fg_fn = _objective_callables(objective)
    n_calls = [0, 0]

    def counted_value(u):
        n_calls[0] += 1
        return value_fn(u)

    def counted_fg(u):
        n_calls[0] += 1
        n_calls[1] += 1
        return fg_fn(u)

    rng = np.random.default_rng(seed)
    starts = ranges.draw(rng, n_starts)
    best = None
    trace = []
    for i in range(n_starts):
        try:
            if fg_fn is not None:
                res = bfgs_minimize(counted_fg, starts[i], max_evals=per_start_evals)
            else:
                res = derivative_free_minimize(
                    counted_value, starts[i], ranges.lower, ranges.upper,
                    rhobeg=0.2 * float(np.min(ranges.half_width)),
                    max_evals=per_start_evals)
        except NumericalError:
            continue
        if keep_trace:
            trace.append((i, res.x, res.value))
        if best is None or res.value < best.value:
            best = res
    if best is None:
        raise NumericalError("no restart produced a finite objective value")
    return OptimizationResult(best.x, best.value, n_calls[0], n_calls[1],
                              best.converged, tuple(trace))


def _objective_callables(objective):
    """(value, value_and_grad-or-None) from an adaptor object or a callable."""
    if hasattr(objective, "value"):
        fg = objective.value_and_grad if getattr(objective, "has_gradient", False) \
            else None
        return objective.value, fg
    if callable(objective):
        return objective, None
    raise DataError("objective must be callable or expose .value")


# ---- registration adaptors ---------------------------------------------------


DISA = "disa"
LC2 = "lc2"
MIND = "mind"


def default_scale(mode: str) -> np.ndarray:
    """Scaled-unit convention: 1 rad = 100 mm = alpha 1.0 = beta 10.0."""
    if mode == RIGID:
        return np.array([1.0, 1.0, 1.0, 100.0, 100.0, 100.0])
    if mode == AFFINE:
        return np.array([1.0] * 9 + [100.0] * 3)
    if mode == RIGID_PROBE:
        return np.array([1.0, 1.0, 1.0, 100.0, 100.0, 100.0, 1.0, 10.0])
    raise DataError(f"unknown transform mode {mode!r}")


class RegistrationObjective:
    """Negated similarity over scaled parameters, gradient when the metric
    supports one. ``no overlap`` from the metric becomes +inf so restart
    drivers can discard the pose instead of dying."""

    def __init__(self, value_fn, grad_fn, base_chain: TransformChain,
                 scale: np.ndarray):
        self._value = value_fn
        self._grad = grad_fn
        self._base = base_chain
        self._scale = np.asarray(scale, dtype=np.float64)
        if self._scale.size != base_chain.n_params:
            raise DataError("scale length does not match transform mode")

    @property
    def has_gradient(self) -> bool:
        return self._grad is not None

    @property
    def n_params(self) -> int:
        return self._base.n_params

    @property
    def scale(self) -> np.ndarray:
        return self._scale.copy()

    @property
    def start_params(self) -> np.ndarray:
        """Scaled parameters of the identity/base transform."""
        return self.scaled_params(self._base)

    def chain_from(self, u) -> TransformChain:
        u = np.asarray(u, dtype=np.float64).ravel()
        if u.size != self._base.n_params:
            raise DataError(f"parameter vector length {u.size} != {self._base.n_params}")
        return self._base.with_params(u * self._scale)

    def scaled_params(self, chain: TransformChain) -> np.ndarray:
        return chain.params() / self._scale

    def value(self, u) -> float:
        try:
            return -float(self._value(self.chain_from(u)))
        except NumericalError:
            return float("inf")

    def value_and_grad(self, u):
        if self._grad is None:
            raise NumericalError("gradient unavailable")
        try:
            v, g = self._grad(self.chain_from(u))
        except NumericalError:
            return float("inf"), np.zeros(self._base.n_params)
        return -float(v), -np.asarray(g) * self._scale


def _source_center(f: FeatureMap) -> np.ndarray:
    half = (np.array(f.source_dims, dtype=np.float64) - 1.0) / 2.0
    return (half * f.spacing) @ f.direction.T + f.origin


def _volume_center(v: Volume) -> np.ndarray:
    half = (np.array(v.dims, dtype=np.float64) - 1.0) / 2.0
    return v.world_from_index(half)


def _base_chain(mode, center, probe):
    if mode == RIGID_PROBE:
        if probe is None:
            raise DataError("rigid+probe mode needs probe geometry")
        return TransformChain(RIGID_PROBE, identity_transform(RIGID, center).linear,
                              probe)
    if probe is not None:
        raise DataError(f"probe geometry given for mode {mode!r}")
    return identity_transform(mode, center)


def make_registration_objective(similarity: str, fixed, moving, mode: str = RIGID,
                                weights: WeightMap | None = None, *,
                                center=None, samples=None,
                                max_samples: int = 32768,
                                sample_grid_step: int = 2,
                                probe: ProbeDeform | None = None,
                                seed: int = 0) -> RegistrationObjective:
    """Build the scaled, negated objective for one fixed/moving pair.

    ``fixed``/``moving`` are FeatureMaps for "disa", Volumes for "lc2", and
    MindDescriptors for "mind"; each metric's heavy precomputation happens
    here, once, so optimizer iterations only interpolate.
    """
    if similarity == DISA:
        return _make_disa_objective(fixed, moving, mode, weights, center, samples,
                                    max_samples, probe, seed)
    if similarity == LC2:
        return _make_lc2_objective(fixed, moving, mode, weights, center,
                                   sample_grid_step, probe)
    if similarity == MIND:
        return _make_mind_objective(fixed, moving, mode, weights, center,
                                    sample_grid_step, probe)
    raise DataError(f"unknown similarity {similarity!r}")


def _make_disa_objective(f_fixed, f_moving, mode, weights, center, samples,
                         max_samples, probe, seed):
    if not isinstance(f_fixed, FeatureMap) or not isinstance(f_moving, FeatureMap):
        raise DataError("disa objective expects feature maps")
    if weights is None:
        grid = f_fixed.grid_volume()
        wd = np.ones(grid.data.shape, dtype=np.float32)
        weights = WeightMap(grid.with_data(wd), float(wd.sum()))
    elif not weights.volume.same_grid(f_fixed.grid_volume()):
        weights = resample_weights_to_feature_grid(weights, f_fixed)
    if samples is None:
        samples = default_samples(f_fixed, weights, max_samples=max_samples,
                                  seed=seed)
    dot = DotObjective(f_fixed, f_moving, weights, samples)
    base = _base_chain(mode, center if center is not None else _source_center(f_fixed),
                       probe)
    return RegistrationObjective(dot.value, dot.value_and_grad, base,
                                 default_scale(mode))


def _make_lc2_objective(fixed, moving, mode, weights, center, sample_grid_step,
                        probe):
    if not isinstance(fixed, Volume) or not isinstance(moving, Volume):
        raise DataError("lc2 objective expects volumes")
    if weights is None:
        weights = weight_map(fixed)
    moving_grad = gradient_magnitude(moving)

    def value(chain):
        return lc2_global(fixed, moving, chain, weights=weights,
                          sample_grid_step=sample_grid_step,
                          moving_grad=moving_grad)

    base = _base_chain(mode, center if center is not None else _volume_center(fixed),
                       probe)
    return RegistrationObjective(value, None, base, default_scale(mode))


def _make_mind_objective(d_fixed, d_moving, mode, weights, center,
                         sample_grid_step, probe):
    if not isinstance(d_fixed, MindDescriptor) or not isinstance(d_moving, MindDescriptor):
        raise DataError("mind objective expects descriptors")
    step = max(1, int(sample_grid_step))
    nz, ny, nx = d_fixed.data.shape[1:]
    zz, yy, xx = np.meshgrid(np.arange(0, nz, step), np.arange(0, ny, step),
                             np.arange(0, nx, step), indexing="ij")
    xx, yy, zz = xx.ravel(), yy.ravel(), zz.ravel()
    idx = np.stack([xx, yy, zz], axis=1).astype(np.float64)
    world = (idx * d_fixed.spacing) @ d_fixed.direction.T + d_fixed.origin
    fdesc = np.ascontiguousarray(d_fixed.data[:, zz, yy, xx].T.astype(np.float32))
    mdata = np.ascontiguousarray(np.moveaxis(d_moving.data, 0, -1).astype(np.float32))
    if weights is not None:
        if weights.volume.data.shape != (nz, ny, nx):
            raise DataError("weights not on the fixed descriptor grid")
        w = weights.volume.data[zz, yy, xx].astype(np.float64)
    else:
        w = np.ones(len(idx))
    n_ch = d_fixed.n_channels
    mdim = np.array([nxm - 1 for nxm in (d_moving.data.shape[3],
                                         d_moving.data.shape[2],
                                         d_moving.data.shape[1])], dtype=np.float64)

    def evaluate(chain):
        pts = apply_point(chain, world)
        cells = d_moving.index_from_world(pts)
        inside = np.all((cells >= 0.0) & (cells <= mdim), axis=1).astype(np.uint8)
        gcell = np.empty((len(idx), 3))
        num, den = _kernels.ssd_accumulate_grad_f32(
            mdata, cells[:, 0], cells[:, 1], cells[:, 2], inside, fdesc, w, gcell)
        if den <= 0.0:
            raise NumericalError("no overlap")
        gworld = (gcell / d_moving.spacing) @ d_moving.direction.T
        gparam = spatial_to_param_gradient(chain, world, gworld, weights=w)
        return -num / (den * n_ch), -gparam / (den * n_ch)

    def value(chain):
        return evaluate(chain)[0]

    def grad(chain):
        return evaluate(chain)

    base = _base_chain(mode, center if center is not None else
                       _descriptor_center(d_fixed), probe)
    return RegistrationObjective(value, grad, base, default_scale(mode))


def _descriptor_center(d: MindDescriptor) -> np.ndarray:
    nz, ny, nx = d.data.shape[1:]
    half = (np.array([nx, ny, nz], dtype=np.float64) - 1.0) / 2.0
    return (half * d.spacing) @ d.direction.T + d.origin
