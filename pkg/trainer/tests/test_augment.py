"""Rotation group correctness and label preservation of the augmenter."""

import numpy as np
import pytest

from disatrain import (N_ROTATIONS, PatchPairRecord, apply_draw, augment,
                       rotate_cube, rotation_matrices)
from disatrain.augment import _resample_rotate


def random_record(seed=0, side=15):
    rng = np.random.default_rng(seed)
    return PatchPairRecord(
        rng.standard_normal((side, side, side)).astype(np.float32),
        rng.standard_normal((side, side, side)).astype(np.float32),
        float(np.float32(rng.uniform())))


def test_matrices_form_the_rotation_group():
    mats = rotation_matrices()
    assert mats.shape == (24, 3, 3)
    assert np.array_equal(mats[0], np.eye(3, dtype=np.int64))
    seen = {m.tobytes() for m in mats}
    assert len(seen) == 24
    for m in mats:
        assert np.array_equal(m @ m.T, np.eye(3, dtype=np.int64))
        assert round(np.linalg.det(m)) == 1
    # closed under composition
    for a in mats[::5]:
        for b in mats[::7]:
            assert (a @ b).tobytes() in seen


def test_rotate_matches_matrix_action():
    # rotated value at R(p - c) + c equals the original value at p
    side = 7
    rng = np.random.default_rng(1)
    cube = rng.standard_normal((side, side, side)).astype(np.float32)
    c = (side - 1) / 2.0
    mats = rotation_matrices()
    for k in range(N_ROTATIONS):
        rot = rotate_cube(cube, k)
        for _ in range(20):
            p = rng.integers(0, side, 3)  # (x, y, z)
            q = mats[k] @ (p - c) + c
            qx, qy, qz = np.rint(q).astype(int)
            assert rot[qz, qy, qx] == cube[p[2], p[1], p[0]]


def test_rotations_permute_voxels():
    cube = np.arange(15 ** 3, dtype=np.float32).reshape(15, 15, 15)
    base = np.sort(cube.ravel())
    distinct = set()
    for k in range(N_ROTATIONS):
        rot = rotate_cube(cube, k)
        assert np.array_equal(np.sort(rot.ravel()), base)
        distinct.add(rot.tobytes())
    assert len(distinct) == 24
    assert np.array_equal(rotate_cube(cube, 0), cube)


def test_rotation_composition_and_inverse():
    mats = rotation_matrices()
    index = {m.tobytes(): i for i, m in enumerate(mats)}
    cube = np.random.default_rng(2).standard_normal((5, 5, 5)).astype(np.float32)
    for k in (3, 11, 17, 23):
        j = index[mats[k].T.copy().tobytes()]  # transpose is the inverse
        assert np.array_equal(rotate_cube(rotate_cube(cube, k), j), cube)
    # composing two rotations equals the composed matrix's rotation
    a, b = 5, 14
    ab = index[(mats[a] @ mats[b]).tobytes()]
    assert np.array_equal(rotate_cube(rotate_cube(cube, b), a),
                          rotate_cube(cube, ab))


def test_rotate_cube_rejects():
    with pytest.raises(ValueError):
        rotate_cube(np.zeros((3, 4, 3), dtype=np.float32), 0)
    with pytest.raises(ValueError):
        rotate_cube(np.zeros((3, 3, 3), dtype=np.float32), 24)


def test_identity_draw_leaves_record_unchanged():
    rec = random_record(3)
    out = apply_draw(rec, 0, 1.0, 0.0, 1.0, 0.0)
    assert np.array_equal(out.patch_m, rec.patch_m)
    assert np.array_equal(out.patch_f, rec.patch_f)
    assert out.target == rec.target


def test_apply_draw_shared_rotation_independent_intensity():
    rec = random_record(4)
    out = apply_draw(rec, 7, -1.25, 0.3, 0.8, -0.1)
    want_m = np.float32(-1.25) * rotate_cube(rec.patch_m, 7) + np.float32(0.3)
    want_f = np.float32(0.8) * rotate_cube(rec.patch_f, 7) + np.float32(-0.1)
    assert np.array_equal(out.patch_m, want_m)
    assert np.array_equal(out.patch_f, want_f)


def test_target_survives_every_draw():
    rec = random_record(5)
    for seed in range(100):
        out = augment(rec, seed)
        assert out.target == rec.target
        assert out.patch_m.shape == rec.patch_m.shape


def test_augment_draw_distributions():
    rec = random_record(6)
    gains_m, offs_m = [], []
    rotated = 0
    for seed in range(400):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(0, N_ROTATIONS))
        out = augment(rec, seed)
        if k != 0:
            rotated += 1
        # recover the affine map from the known rotation
        base = rotate_cube(rec.patch_m, k).ravel().astype(np.float64)
        A = np.stack([base, np.ones_like(base)], axis=1)
        gain, off = np.linalg.lstsq(A, out.patch_m.ravel().astype(np.float64),
                                    rcond=None)[0]
        gains_m.append(gain)
        offs_m.append(off)
    gains = np.abs(gains_m)
    assert gains.min() >= 0.5 - 1e-6 and gains.max() <= 2.0 + 1e-6
    assert np.min(gains_m) < 0 < np.max(gains_m)  # both signs occur
    assert np.abs(offs_m).max() <= 0.5 + 1e-6
    assert rotated > 300  # 1/24 chance of identity each


def test_augment_toggles():
    rec = random_record(7)
    out = augment(rec, 11, rotate=False, intensity=False)
    assert np.array_equal(out.patch_m, rec.patch_m)
    out = augment(rec, 11, rotate=False)
    # intensity only: still an affine map of the original
    a = rec.patch_m.ravel().astype(np.float64)
    b = out.patch_m.ravel().astype(np.float64)
    gain, off = np.linalg.lstsq(np.stack([a, np.ones_like(a)], 1), b,
                                rcond=None)[0]
    assert np.allclose(gain * a + off, b, atol=1e-5)


def test_small_angle_right_angle_is_exact():
    # a 90 degree resample lands on lattice points and must match the
    # corresponding exact rotation
    rng = np.random.default_rng(8)
    cube = rng.standard_normal((9, 9, 9)).astype(np.float32)
    got = _resample_rotate(cube, (np.pi / 2, 0.0, 0.0))
    want_mat = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=np.int64)
    mats = rotation_matrices()
    k = next(i for i, m in enumerate(mats) if np.array_equal(m, want_mat))
    assert np.allclose(got, rotate_cube(cube, k), atol=1e-5)


def test_small_angle_perturbs_gently():
    # on a smooth cube the wobble shifts values by about angle * radius *
    # gradient, far below the voxel noise scale
    zz, yy, xx = np.meshgrid(*[np.linspace(-1, 1, 15)] * 3, indexing="ij")
    smooth = np.exp(-2.0 * (xx ** 2 + 1.3 * yy ** 2 + 0.7 * zz ** 2))
    rec = PatchPairRecord(smooth.astype(np.float32),
                          smooth[::-1].copy().astype(np.float32), 0.5)
    out = augment(rec, 13, rotate=False, intensity=False, small_angle=1e-4)
    assert out.target == rec.target
    assert not np.array_equal(out.patch_m, rec.patch_m)
    assert float(np.abs(out.patch_m - rec.patch_m).max()) < 1e-3
