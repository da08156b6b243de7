"""End-to-end property gate: one test per contract the package must honor.

Each test states its tolerance inline and fails loudly on its own line; the
protocols lean on exact constructions (planted transforms, unit-norm
descriptors, pristine sample blocks) so expected values are derivable, not
tuned.
"""

import time

import numpy as np
import pytest
import scipy.stats
from scipy.spatial.distance import cdist

from disareg import sampling
from disareg.cnn_infer import infer, random_network
from disareg.eval import (LabelVolume, LandmarkSet, dice, format_table1,
                          format_table3, fre, hd95)
from disareg.features import (DotObjective, FeatureMap, default_samples,
                              dot_objective, quantize,
                              resample_weights_to_feature_grid)
from disareg.metrics import (LC2_RADII, WeightMap, lc2_global, lc2_patch,
                             weight_map)
from disareg.optim import (SearchRanges, bfgs_minimize, global_search,
                           make_registration_objective)
from disareg.sampling import PATCH_RADIUS, sample_pairs, weighted_draws
from disareg.transform import (ProbeDeform, RigidParams, TransformChain,
                               apply_point, identity_transform,
                               jacobian_params, probe_displacement,
                               probe_falloff, rotation_matrix, warp_volume)
from disareg.volume import Patch, Volume, extract_patch, gradient_magnitude

from phantoms import gaussian_blobs, grid_center, shelled_sphere, sin_lattice
from test_cnn_infer import naive_forward
from test_features import (all_cells, boundary_avoiding_subset, flat_weights,
                           unit_descriptor_map)


def rotation_angle_deg(Ra, Rb):
    cosang = (np.trace(Ra @ Rb.T) - 1.0) / 2.0
    return np.rad2deg(np.arccos(np.clip(cosang, -1.0, 1.0)))


# ---- patch similarity --------------------------------------------------------


def qr_lc2(y, m, g):
    """Least squares through an explicit QR factorization, no normal equations."""
    A = np.column_stack([m, g, np.ones_like(y)])
    q, r = np.linalg.qr(A)
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - A @ beta
    vy = y.var()
    if vy <= 1e-10:
        return 0.0
    return float(np.clip(1.0 - (resid @ resid / y.size) / vy, 0.0, 1.0))


def test_patch_similarity_matches_qr_least_squares():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        r = LC2_RADII[i % 3]
        n = (2 * r + 1) ** 3
        y = rng.standard_normal(n)
        m = 0.4 * y + rng.standard_normal(n)
        g = np.abs(rng.standard_normal(n))
        fast = lc2_patch(Patch(r, y.astype(np.float32), (0, 0, 0)),
                         Patch(r, m.astype(np.float32), (0, 0, 0)),
                         Patch(r, g.astype(np.float32), (0, 0, 0)))
        want = qr_lc2(y.astype(np.float32).astype(np.float64),
                      m.astype(np.float32).astype(np.float64),
                      g.astype(np.float32).astype(np.float64))
        worst = max(worst, abs(fast - want))
    elapsed = time.perf_counter() - start
    assert worst < 1e-6, f"worst |lc2 - qr oracle| = {worst:.2e}"
    assert elapsed < 10.0, f"1000 triples took {elapsed:.1f}s"


def test_patch_similarity_affine_invariances():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(500):
        r = 3
        n = (2 * r + 1) ** 3
        y = rng.standard_normal(n).astype(np.float32)
        m = (0.3 * y + rng.standard_normal(n)).astype(np.float32)
        g = np.abs(rng.standard_normal(n)).astype(np.float32)

        def val(yy, mm, gg):
            return lc2_patch(Patch(r, yy, (0, 0, 0)), Patch(r, mm, (0, 0, 0)),
                             Patch(r, gg, (0, 0, 0)))

        base = val(y, m, g)
        a, b = rng.uniform(0.5, 3.0) * rng.choice([-1.0, 1.0]), rng.uniform(-5, 5)
        worst = max(worst, abs(val((a * y + b).astype(np.float32), m, g) - base))
        a1, b1 = rng.uniform(0.5, 3.0) * rng.choice([-1.0, 1.0]), rng.uniform(-5, 5)
        a2, b2 = rng.uniform(0.5, 3.0) * rng.choice([-1.0, 1.0]), rng.uniform(-5, 5)
        worst = max(worst, abs(val(y, (a1 * m + b1).astype(np.float32),
                                   (a2 * g + b2).astype(np.float32)) - base))
    assert worst < 1e-6, f"worst invariance violation = {worst:.2e}"


def unit_norm_copy(fmap):
    d = fmap.descriptors_f32()
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    dn = np.where(n > 1e-6, d / np.maximum(n, 1e-6), 0.0).astype(np.float32)
    return FeatureMap(dn, fmap.stride, fmap.source_dims, fmap.spacing,
                      fmap.origin, fmap.direction)


def test_self_similarity_on_three_phantoms():
    phantoms = [gaussian_blobs((48, 48, 48), n_blobs=6, seed=0),
                sin_lattice((48, 48, 48)),
                shelled_sphere((48, 48, 48))]
    net = random_network(0)
    for vol in phantoms:
        glob = lc2_global(vol, vol, identity_transform())
        assert glob >= 0.999, f"self lc2_global = {glob:.5f}"
        fmap = unit_norm_copy(infer(net, vol))
        w = resample_weights_to_feature_grid(weight_map(vol), fmap)
        samples = default_samples(fmap, w)
        val = dot_objective(fmap, fmap, identity_transform(), w, samples)
        assert val >= 0.99, f"self dot objective = {val:.5f}"


# ---- gradients ---------------------------------------------------------------


def random_chain(rng, mode, center):
    if mode == "rigid":
        return TransformChain("rigid", RigidParams(rng.uniform(-0.15, 0.15, 3),
                                                   rng.uniform(-2.5, 2.5, 3),
                                                   center))
    from disareg.transform import AffineParams
    m = np.eye(3) + rng.uniform(-0.05, 0.05, (3, 3))
    return TransformChain("affine", AffineParams(m, rng.uniform(-2.5, 2.5, 3),
                                                 center))


def test_objective_gradient_and_jacobian_match_finite_differences():
    ff = unit_descriptor_map((10, 10, 10), seed=2)
    fm = unit_descriptor_map((10, 10, 10), seed=3)
    w = flat_weights(ff)
    cells = all_cells(ff)
    center = np.array([20.0, 20.0, 20.0])
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    worst_grad = 0.0
    worst_jac = 0.0
    done = 0
    while done < 100:
        mode = "rigid" if done % 2 == 0 else "affine"
        chain = random_chain(rng, mode, center)

        # parameter jacobian of the point map, against central differences
        pt = rng.uniform(2.0, 38.0, 3)
        J = jacobian_params(chain, pt)
        p0 = chain.params()
        Jfd = np.empty_like(J)
        for i in range(chain.n_params):
            h = 1e-6
            pp, pm = p0.copy(), p0.copy()
            pp[i] += h
            pm[i] -= h
            Jfd[:, i] = (apply_point(chain.with_params(pp), pt)
                         - apply_point(chain.with_params(pm), pt)) / (2 * h)
        worst_jac = max(worst_jac, np.linalg.norm(J - Jfd)
                        / max(np.linalg.norm(Jfd), 1e-12))

        probe = DotObjective(ff, fm, w, cells)
        sub = boundary_avoiding_subset(probe, cells, chain)
        if sub.shape[0] < 100:
            continue
        obj = DotObjective(ff, fm, w, sub)
        _, grad = obj.value_and_grad(chain)
        fd = np.empty_like(grad)
        for i in range(chain.n_params):
            h = 1e-5 if i < chain.n_params - 3 else 1e-4
            pp, pm = p0.copy(), p0.copy()
            pp[i] += h
            pm[i] -= h
            fd[i] = (obj.value(chain.with_params(pp))
                     - obj.value(chain.with_params(pm))) / (2 * h)
        worst_grad = max(worst_grad, np.linalg.norm(grad - fd)
                         / max(np.linalg.norm(fd), 1e-12))
        done += 1
    elapsed = time.perf_counter() - start
    assert worst_grad < 1e-4, f"objective gradient rel err = {worst_grad:.2e}"
    assert worst_jac < 1e-4, f"parameter jacobian rel err = {worst_jac:.2e}"
    assert elapsed < 30.0, f"100 poses took {elapsed:.1f}s"


# ---- inference engine --------------------------------------------------------


def test_inference_matches_reference_loops():
    for seed in (0, 1):
        net = random_network(seed)
        vol = gaussian_blobs((32, 32, 32), n_blobs=5, seed=seed + 10)
        fast = infer(net, vol).data
        slow = np.moveaxis(naive_forward(net, vol.data[None]), 0, -1)
        np.testing.assert_allclose(fast, slow, rtol=1e-4, atol=1e-6)


def test_inference_stride_shift_equivariance():
    net = random_network(2)
    vol = gaussian_blobs((80, 80, 80), n_blobs=10, seed=12)
    full = infer(net, vol).data
    crop = Volume(vol.data[4:, :, 4:], vol.spacing, vol.origin, vol.direction)
    shifted = infer(net, crop).data
    # cells whose receptive field misses the zero padding in both runs
    got = shifted[7:12, 7:13, 7:12]
    want = full[8:13, 7:13, 8:13]
    diff = np.abs(got - want).max()
    assert diff < 1e-4, f"max interior equivariance error = {diff:.2e}"


# ---- quantization ------------------------------------------------------------


@pytest.mark.slow
def test_quantized_features_register_like_float():
    net = random_network(0)
    moving = gaussian_blobs((80, 80, 80), spacing=(2.5, 2.5, 2.5), n_blobs=20,
                            seed=5)
    moving = moving.with_data(moving.data * 6.0)
    c = grid_center(moving)
    angles = np.array([np.deg2rad(20.0), 0.0, 0.0])
    t_mm = np.array([48.0, -51.2, 38.4])
    truth = TransformChain("rigid", RigidParams(angles, t_mm, c))
    # realize the plant through the grid geometry: same voxel array seen from
    # a frame 20 deg / 80 mm away, so descriptor correspondence is exact and
    # the comparison isolates quantization, not CNN rotation equivariance
    R = rotation_matrix(angles)
    fixed = Volume(moving.data, moving.spacing,
                   R.T @ (moving.origin - c - t_mm) + c, R.T)
    ff = infer(net, fixed)
    fm = infer(net, moving)
    w = weight_map(fixed)
    start = truth.with_params(truth.params()
                              + np.array([0.03, -0.02, 0.025, 4.0, -5.0, 3.0]))
    finals = []
    for fa, fb in ((ff, fm), (quantize(ff), quantize(fm))):
        obj = make_registration_objective("disa", fa, fb, mode="rigid",
                                          weights=w, center=c)
        res = bfgs_minimize(obj.value_and_grad, obj.scaled_params(start),
                            max_iters=300, grad_tol=1e-7)
        finals.append(obj.chain_from(res.x))
    cf, cq = finals
    dt = np.linalg.norm(cf.linear.translation - cq.linear.translation)
    dr = rotation_angle_deg(rotation_matrix(cf.linear.rotation),
                            rotation_matrix(cq.linear.rotation))
    assert dt < 0.5, f"quantized vs float translation differs by {dt:.3f} mm"
    assert dr < 0.5, f"quantized vs float rotation differs by {dr:.3f} deg"
    # both must actually sit on the planted pose, not agree somewhere else
    for ch in finals:
        assert np.linalg.norm(ch.linear.translation - t_mm) < 0.5
        assert rotation_angle_deg(rotation_matrix(ch.linear.rotation), R) < 0.5


# ---- global capture range ----------------------------------------------------


@pytest.mark.slow
def test_global_search_recovers_large_displacements():
    net = random_network(0)
    moving = gaussian_blobs((96, 96, 96), spacing=(2.5, 2.5, 2.5), n_blobs=30,
                            seed=3)
    moving = moving.with_data(moving.data * 6.0)
    tvox = np.array([24, -20, 12])
    t_mm = tvox * 2.5
    c = grid_center(moving)
    truth = TransformChain("rigid", RigidParams(np.zeros(3),
                                                t_mm.astype(np.float64), c))
    fixed = warp_volume(moving, truth, moving)
    ff = infer(net, fixed)
    fm = infer(net, moving)
    w = resample_weights_to_feature_grid(weight_map(fixed), ff)

    # sample only cells whose receptive fields avoid both volumes' padding and
    # the warp fill: those are exactly shift-equivariant, so the planted pose
    # is the strict optimum
    half = 27
    lo = np.maximum(half, half - tvox)
    hi = np.minimum(96 - half, 96 - half - tvox)
    cl = np.ceil(lo / 4).astype(int)
    ch = (hi - 2) // 4
    zz, yy, xx = np.meshgrid(np.arange(cl[2], ch[2] + 1),
                             np.arange(cl[1], ch[1] + 1),
                             np.arange(cl[0], ch[0] + 1), indexing="ij")
    cells = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    wdata = w.volume.data
    cells = cells[wdata[cells[:, 2], cells[:, 1], cells[:, 0]] > 0]
    assert cells.shape[0] >= 100

    obj = make_registration_objective("disa", ff, fm, mode="rigid", weights=w,
                                      center=c, samples=cells)
    rot = np.deg2rad(40.0)
    ranges = SearchRanges([-rot] * 3 + [-1.5] * 3, [rot] * 3 + [1.5] * 3)
    lms = LandmarkSet(np.stack(np.meshgrid(*[np.linspace(40.0, 200.0, 3)] * 3,
                                           indexing="ij"), -1).reshape(-1, 3))
    truth_pts = apply_point(truth, lms.points)

    start = time.perf_counter()
    hits = 0
    for trial in range(20):
        res = global_search(obj, ranges, n_starts=200, seed=trial,
                            per_start_evals=60)
        best = res.x
        polish = bfgs_minimize(obj.value_and_grad, best, max_iters=60)
        if polish.value < res.value:
            best = polish.x
        got = apply_point(obj.chain_from(best), lms.points)
        fre_mm = float(np.mean(np.linalg.norm(got - truth_pts, axis=1)))
        hits += fre_mm < 2.0
    elapsed = time.perf_counter() - start
    assert hits >= 18, f"recovered {hits}/20 trials"
    assert elapsed < 120.0, f"20 global searches took {elapsed:.1f}s"


# ---- probe deformation -------------------------------------------------------


def test_probe_displacement_bounded_radial_continuous():
    rng = np.random.default_rng(6)
    for _ in range(100):
        r = rng.uniform(5.0, 50.0)
        R = r * rng.uniform(1.5, 4.0)
        alpha = rng.uniform(0.0, 1.0)
        beta = rng.uniform(0.0, 10.0)
        c = rng.uniform(-40.0, 40.0, 3)
        deform = ProbeDeform(c, r, R, alpha, beta)
        dirs = rng.standard_normal((1000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = c + dirs * rng.uniform(0.0, 1.5 * R, (1000, 1))
        d = probe_displacement(pts, deform)
        norms = np.linalg.norm(d, axis=1)
        assert norms.max() <= alpha * R + 1e-12
        u = pts - c
        un = np.linalg.norm(u, axis=1, keepdims=True)
        u = np.where(un > 0, u / np.maximum(un, 1e-300), 0.0)
        tangential = d - (np.sum(d * u, axis=1, keepdims=True)) * u
        assert np.abs(tangential).max() < 1e-9
        for x in (0.8 * r, r, R):
            delta = 1e-12 * max(1.0, x)
            jump = abs(float(probe_falloff(x + delta, r, R))
                       - float(probe_falloff(x - delta, r, R)))
            assert jump < 1e-9, f"falloff jump {jump:.2e} at x={x}"


# ---- training pair sampling --------------------------------------------------


def test_sampled_pairs_minimize_similarity_distance():
    moving = gaussian_blobs((32, 32, 32), n_blobs=6, seed=30)
    fixed = gaussian_blobs((32, 32, 32), n_blobs=6, seed=31)
    n, stride, seed = 50, 4, 7
    run = sample_pairs(moving, fixed, n=n, candidate_stride=stride, seed=seed,
                       gradient_side="fixed")
    centers_m = sampling._interior_centers(moving.dims, 1)
    candidates = sampling._interior_centers(fixed.dims, stride)
    wvol = weight_map(moving).volume.data
    w = wvol[centers_m[:, 2], centers_m[:, 1], centers_m[:, 0]]
    rng = np.random.default_rng(seed)
    picks = weighted_draws(w, rng, n)
    ts = rng.uniform(0.0, 1.0, n)
    grad = gradient_magnitude(fixed)
    for k, rec in enumerate(run):
        cm = centers_m[picks[k]]
        sims = np.empty(len(candidates))
        for j, cf in enumerate(candidates):
            sims[j] = np.mean([lc2_patch(extract_patch(moving, cm, r),
                                         extract_patch(fixed, cf, r),
                                         extract_patch(grad, cf, r))
                               for r in LC2_RADII])
        j = int(np.argmin(np.abs(sims - ts[k])))
        assert rec.target == np.float32(sims[j])
        np.testing.assert_array_equal(
            rec.patch_m,
            extract_patch(moving, cm, PATCH_RADIUS).data.reshape(rec.patch_m.shape))


def test_source_selection_follows_weights():
    weights = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0])
    n = 100000
    draws = weighted_draws(weights, np.random.default_rng(8), n)
    counts = np.bincount(draws, minlength=10)
    expected = weights / weights.sum() * n
    _, p = scipy.stats.chisquare(counts, expected)
    assert p > 0.01, f"chi-square p = {p:.4f}"


# ---- evaluation metrics ------------------------------------------------------


def brute_hd95(a, b, label, spacing):
    def surface_points(lv):
        pts = []
        d = lv.data
        nz, ny, nx = d.shape
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    if d[z, y, x] != label:
                        continue
                    on_edge = (z in (0, nz - 1) or y in (0, ny - 1)
                               or x in (0, nx - 1))
                    if not on_edge:
                        nb = [d[z - 1, y, x], d[z + 1, y, x], d[z, y - 1, x],
                              d[z, y + 1, x], d[z, y, x - 1], d[z, y, x + 1]]
                        if all(v == label for v in nb):
                            continue
                    pts.append((x * spacing[0], y * spacing[1], z * spacing[2]))
        return np.asarray(pts)

    pa, pb = surface_points(a), surface_points(b)
    dmat = cdist(pa, pb)
    return max(float(np.percentile(dmat.min(axis=1), 95.0)),
               float(np.percentile(dmat.min(axis=0), 95.0)))


def test_eval_metrics_match_brute_force():
    rng = np.random.default_rng(9)

    a = LandmarkSet(rng.uniform(-50, 50, (20, 3)))
    b = LandmarkSet(rng.uniform(-50, 50, (20, 3)))
    chain = TransformChain("rigid", RigidParams(np.array([0.2, -0.1, 0.3]),
                                                np.array([5.0, -3.0, 7.0]),
                                                np.zeros(3)))
    mapped = apply_point(chain, b.points)
    want = sum(float(np.sqrt(np.sum((a.points[i] - mapped[i]) ** 2)))
               for i in range(20)) / 20
    assert abs(fre(a, b, chain) - want) < 1e-6

    spacing = np.array([1.0, 1.5, 2.0])
    from scipy.ndimage import gaussian_filter
    masks = []
    for seed in (10, 11):
        noise = gaussian_filter(np.random.default_rng(seed)
                                .standard_normal((16, 16, 16)), 2.5)
        masks.append(LabelVolume((noise > 0).astype(np.int32), spacing,
                                 np.zeros(3), np.eye(3), 1))
    la, lb = masks
    inter = sum(1 for z in range(16) for y in range(16) for x in range(16)
                if la.data[z, y, x] == 1 and lb.data[z, y, x] == 1)
    na = int((la.data == 1).sum())
    nb = int((lb.data == 1).sum())
    assert abs(dice(la, lb, 1) - 2.0 * inter / (na + nb)) < 1e-6
    assert abs(hd95(la, lb, 1) - brute_hd95(la, lb, 1, spacing)) < 1e-6


def test_result_tables_render_published_values():
    table1 = format_table1([
        ("MIND-SSC", "Rigid", {"avg": 5.05, "p25": 1.69, "p50": 2.20, "p75": 3.31}),
        ("MIND-SSC", "Affine", {"avg": 2.01, "p25": 1.44, "p50": 1.84, "p75": 2.29}),
        ("LC2", "Rigid", {"avg": 1.71, "p25": 1.31, "p50": 1.56, "p75": 1.72}),
        ("LC2", "Affine", {"avg": 1.73, "p25": 1.32, "p50": 1.67, "p75": 1.89}),
        ("DISA-LC2", "Rigid", {"avg": 1.82, "p25": 1.37, "p50": 1.65, "p75": 1.80}),
        ("DISA-LC2", "Affine", {"avg": 1.74, "p25": 1.33, "p50": 1.58, "p75": 1.73}),
    ])
    assert table1 == (
        "Method      Mode    Avg. FRE  FRE25  FRE50  FRE75\n"
        "MIND-SSC    Rigid       5.05   1.69   2.20   3.31\n"
        "MIND-SSC    Affine      2.01   1.44   1.84   2.29\n"
        "LC2         Rigid       1.71   1.31   1.56   1.72\n"
        "LC2         Affine      1.73   1.32   1.67   1.89\n"
        "DISA-LC2    Rigid       1.82   1.37   1.65   1.80\n"
        "DISA-LC2    Affine      1.74   1.33   1.58   1.73")
    table3 = format_table3([
        ("MIND-SSC", "Local", (0.236, 0.0, 0.0, 0.0), 0.4, 17),
        ("LC2", "Local", (0.541, 0.140, 0.0, 0.0), 1.9, 98),
        ("DISA-LC2", "Local", (0.703, 0.520, 0.211, 0.058), 0.9, 70),
        ("MIND-SSC", "Global", (0.179, 0.146, 0.053, 0.120), 1.3, 26370),
        ("LC2", "Global", None, 948.0, 38740, True),
        ("DISA-LC2", "Global", (0.755, 0.732, 0.650, 0.640), 1.8, 29250),
    ])
    assert table3 == (
        "Similarity  Search    0-25mm  25-50mm  50-75mm  75-100mm  Time (s)  Num. eval.\n"
        "MIND-SSC    Local      23.6%     0.0%     0.0%      0.0%       0.4          17\n"
        "LC2         Local      54.1%    14.0%     0.0%      0.0%       1.9          98\n"
        "DISA-LC2    Local      70.3%    52.0%    21.1%      5.8%       0.9          70\n"
        "MIND-SSC    Global     17.9%    14.6%     5.3%     12.0%       1.3       26370\n"
        "LC2         Global       N/A      N/A      N/A       N/A    948.0*      38740*\n"
        "DISA-LC2    Global     75.5%    73.2%    65.0%     64.0%       1.8       29250")


# ---- evaluation speed --------------------------------------------------------


def test_objective_evaluation_speed():
    rng = np.random.default_rng(13)
    d = rng.standard_normal((36, 36, 36, 16)).astype(np.float32)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    fmap = FeatureMap(d, 4, (144, 144, 144), np.ones(3), np.zeros(3), np.eye(3))
    grid = fmap.grid_volume()
    w = WeightMap(grid.with_data(np.ones(grid.data.shape, dtype=np.float32)),
                  float(np.prod(grid.data.shape)))
    samples = default_samples(fmap, w, max_samples=32768, seed=0)
    assert len(samples) == 32768
    obj = DotObjective(fmap, fmap, w, samples)
    chain = identity_transform(center=(72.0, 72.0, 72.0)).with_params(
        np.array([0.01, -0.02, 0.015, 3.0, -2.0, 1.0]))
    obj.value(chain)
    best = np.inf
    for _ in range(60):
        t0 = time.perf_counter()
        obj.value(chain)
        best = min(best, time.perf_counter() - t0)
    assert best < 1e-3, f"one evaluation took {best * 1e3:.3f} ms"

    fx = gaussian_blobs((96, 96, 96), n_blobs=20, seed=14)
    mv = gaussian_blobs((96, 96, 96), n_blobs=20, seed=15)
    wm = weight_map(fx)
    grad = gradient_magnitude(mv)
    t_lc2 = np.inf
    for _ in range(2):
        t0 = time.perf_counter()
        lc2_global(fx, mv, chain, weights=wm, moving_grad=grad)
        t_lc2 = min(t_lc2, time.perf_counter() - t0)
    ratio = t_lc2 / best
    assert ratio > 300.0, f"dot objective only {ratio:.0f}x faster than lc2"
