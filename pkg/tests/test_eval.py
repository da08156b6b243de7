import numpy as np
import pytest

from disareg.errors import DataError
from disareg.eval import (BucketStat, LabelVolume, LandmarkSet,
                          convergence_buckets, dice, format_table1,
                          format_table3, fre, fre_percentiles, hd95,
                          load_landmarks, save_landmarks, surface_mask)
from disareg.transform import (AffineParams, RigidParams, TransformChain,
                               apply_point, identity_transform)


def label_volume(data, spacing=(1.0, 1.0, 1.0), max_label=1):
    return LabelVolume(np.asarray(data, dtype=np.int32), spacing,
                       np.zeros(3), np.eye(3), max_label)


def random_rigid(seed):
    rng = np.random.default_rng(seed)
    return TransformChain("rigid", RigidParams(rng.uniform(-0.4, 0.4, 3),
                                               rng.uniform(-20, 20, 3),
                                               rng.uniform(-5, 5, 3)))


# ---- landmark metrics --------------------------------------------------------


def test_fre_identity_zero():
    pts = LandmarkSet(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    assert fre(pts, pts, identity_transform()) == 0.0


def test_fre_three_four_five():
    fixed = LandmarkSet(np.array([[3.0, 4.0, 0.0]]))
    moving = LandmarkSet(np.array([[0.0, 0.0, 0.0]]))
    assert fre(fixed, moving, identity_transform()) == pytest.approx(5.0)


def test_fre_matches_per_pair_recomputation():
    rng = np.random.default_rng(0)
    fixed = LandmarkSet(rng.uniform(-50, 50, (9, 3)))
    moving = LandmarkSet(rng.uniform(-50, 50, (9, 3)))
    chain = random_rigid(1)
    want = np.mean([np.linalg.norm(f - apply_point(chain, m))
                    for f, m in zip(fixed.points, moving.points)])
    assert fre(fixed, moving, chain) == pytest.approx(want, abs=1e-12)


def test_fre_length_mismatch():
    a = LandmarkSet(np.zeros((2, 3)))
    b = LandmarkSet(np.zeros((3, 3)))
    with pytest.raises(DataError, match="counts differ"):
        fre(a, b, identity_transform())


def test_fre_isometry_invariance():
    rng = np.random.default_rng(3)
    fixed = LandmarkSet(rng.uniform(-40, 40, (7, 3)))
    moving = LandmarkSet(rng.uniform(-40, 40, (7, 3)))
    chain = random_rigid(4)
    iso = random_rigid(5)

    # conjugated map q -> iso(chain(iso^-1(q))) recovered from probe points
    def conj(q):
        riso = np.asarray(iso.linear.rotation)
        from disareg.transform import rotation_matrix
        R = rotation_matrix(riso)
        c, t = iso.linear.center, iso.linear.translation
        inv = (R.T @ (q - c - t).T).T + c
        return apply_point(iso, apply_point(chain, inv))

    base = conj(np.zeros((1, 3)))[0]
    M = np.stack([conj(np.eye(3)[i:i + 1])[0] - base for i in range(3)], axis=1)
    conj_chain = TransformChain("affine", AffineParams(matrix3=M, translation=base,
                                                       center=np.zeros(3)))
    f2 = LandmarkSet(apply_point(iso, fixed.points))
    m2 = LandmarkSet(apply_point(iso, moving.points))
    assert abs(fre(f2, m2, conj_chain) - fre(fixed, moving, chain)) < 1e-9


def test_fre_percentiles_quartet():
    st = fre_percentiles([1.0, 2.0, 3.0, 4.0])
    assert st["p50"] == pytest.approx(2.5)
    assert st["avg"] == pytest.approx(2.5)
    assert st["p25"] == pytest.approx(1.75)
    assert st["p75"] == pytest.approx(3.25)


def test_fre_percentiles_single_value():
    st = fre_percentiles([7.5])
    assert st == {"avg": 7.5, "p25": 7.5, "p50": 7.5, "p75": 7.5}


def test_fre_percentiles_empty_errors():
    with pytest.raises(DataError, match="no per-case"):
        fre_percentiles([])


def test_landmark_set_validation():
    with pytest.raises(DataError, match="\\(n, 3\\)"):
        LandmarkSet(np.zeros((2, 2)))
    with pytest.raises(DataError, match="empty"):
        LandmarkSet(np.zeros((0, 3)))
    with pytest.raises(DataError, match="finite"):
        LandmarkSet(np.array([[0.0, np.nan, 0.0]]))


# ---- dice --------------------------------------------------------------------


def test_dice_identical_and_disjoint():
    a = np.zeros((6, 6, 6), dtype=np.int32)
    a[1:3, 1:3, 1:3] = 1
    b = np.zeros_like(a)
    b[4:6, 4:6, 4:6] = 1
    assert dice(label_volume(a), label_volume(a), 1) == 1.0
    assert dice(label_volume(a), label_volume(b), 1) == 0.0


def test_dice_matches_count_oracle():
    rng = np.random.default_rng(2)
    a = (rng.uniform(size=(8, 8, 8)) > 0.5).astype(np.int32)
    b = (rng.uniform(size=(8, 8, 8)) > 0.5).astype(np.int32)
    la, lb = label_volume(a), label_volume(b)
    inter = int(np.sum((a == 1) & (b == 1)))
    want = 2.0 * inter / (int((a == 1).sum()) + int((b == 1).sum()))
    assert dice(la, lb, 1) == pytest.approx(want, abs=0)
    assert dice(la, lb, 1) == dice(lb, la, 1)


def test_dice_both_empty_is_one():
    z = label_volume(np.zeros((4, 4, 4), dtype=np.int32))
    assert dice(z, z, 1) == 1.0


def test_dice_grid_mismatch():
    a = label_volume(np.zeros((4, 4, 4), dtype=np.int32))
    b = label_volume(np.zeros((4, 4, 4), dtype=np.int32), spacing=(2.0, 1.0, 1.0))
    with pytest.raises(DataError, match="grid"):
        dice(a, b, 1)


def test_label_volume_validation():
    with pytest.raises(DataError, match="integer"):
        LabelVolume(np.zeros((3, 3, 3), dtype=np.float32), np.ones(3),
                    np.zeros(3), np.eye(3), 1)
    with pytest.raises(DataError, match="outside"):
        label_volume(np.full((3, 3, 3), 7, dtype=np.int32), max_label=3)


# ---- hd95 --------------------------------------------------------------------


def test_surface_mask_hollow_cube():
    data = np.zeros((7, 7, 7), dtype=np.int32)
    data[1:6, 1:6, 1:6] = 1
    surf = surface_mask(data, 1)
    assert not surf[3, 3, 3]  # strict interior
    assert surf[1, 3, 3] and surf[5, 3, 3] and surf[3, 1, 3]
    assert surf.sum() == 5 ** 3 - 3 ** 3


def test_hd95_identical_is_zero():
    data = np.zeros((8, 8, 8), dtype=np.int32)
    data[2:6, 2:6, 2:6] = 1
    lv = label_volume(data)
    assert hd95(lv, lv, 1) == 0.0


def test_hd95_parallel_slabs():
    a = np.zeros((16, 12, 12), dtype=np.int32)
    b = np.zeros_like(a)
    a[3, :, :] = 1
    b[8, :, :] = 1
    la = label_volume(a, spacing=(1.0, 1.0, 2.0))
    lb = label_volume(b, spacing=(1.0, 1.0, 2.0))
    # 5 voxel layers at 2mm z-spacing
    assert hd95(la, lb, 1) == pytest.approx(10.0, abs=1e-9)
    assert hd95(la, lb, 1) == hd95(lb, la, 1)


def test_hd95_brute_and_edt_agree():
    rng = np.random.default_rng(6)
    base = np.zeros((14, 14, 14))
    for _ in range(4):
        c = rng.uniform(3, 11, 3)
        zz, yy, xx = np.mgrid[0:14, 0:14, 0:14]
        base += np.exp(-((xx - c[0]) ** 2 + (yy - c[1]) ** 2 + (zz - c[2]) ** 2)
                       / rng.uniform(4, 12))
    a = label_volume((base > 0.4).astype(np.int32), spacing=(1.0, 1.5, 2.0))
    b = label_volume((base > 0.7).astype(np.int32), spacing=(1.0, 1.5, 2.0))
    brute = hd95(a, b, 1, method="brute")
    edt = hd95(a, b, 1, method="edt")
    assert abs(brute - edt) < 1e-6
    assert hd95(a, b, 1) == brute  # auto picks brute at this size


def test_hd95_empty_mask_errors():
    data = np.zeros((6, 6, 6), dtype=np.int32)
    data[2:4, 2:4, 2:4] = 1
    lv = label_volume(data)
    empty = label_volume(np.zeros_like(data))
    with pytest.raises(DataError, match="empty mask"):
        hd95(lv, empty, 1)
    with pytest.raises(DataError, match="method"):
        hd95(lv, lv, 1, method="exact")


# ---- convergence buckets -----------------------------------------------------


def test_buckets_all_converged():
    init = [10.0, 30.0, 60.0, 90.0]
    out = convergence_buckets(init, [0.0] * 4)
    assert [b.converged for b in out] == [1.0, 1.0, 1.0, 1.0]
    assert [b.n_cases for b in out] == [1, 1, 1, 1]


def test_buckets_none_converged():
    init = [10.0, 30.0, 60.0, 90.0]
    out = convergence_buckets(init, [99.0] * 4)
    assert [b.converged for b in out] == [0.0, 0.0, 0.0, 0.0]


def test_bucket_edges_and_outliers():
    init = [25.0, 100.0, 150.0]
    out = convergence_buckets(init, [0.0, 0.0, 0.0])
    assert out[1].n_cases == 1     # 25 belongs to [25, 50)
    assert out[3].n_cases == 1     # 100 is included in the last bucket
    assert sum(b.n_cases for b in out) == 2  # 150 ignored
    assert out[0].converged is None
    assert out[0] == BucketStat(0.0, 25.0, 0, None)


def test_buckets_mixed_fraction():
    out = convergence_buckets([10.0, 12.0, 14.0, 16.0], [1.0, 20.0, 1.0, 1.0])
    assert out[0].n_cases == 4
    assert out[0].converged == pytest.approx(0.75)


def test_buckets_validation():
    with pytest.raises(DataError, match="counts differ"):
        convergence_buckets([1.0], [1.0, 2.0])
    with pytest.raises(DataError, match="edges"):
        convergence_buckets([1.0], [1.0], bucket_edges=(0.0,))
    with pytest.raises(DataError, match="edges"):
        convergence_buckets([1.0], [1.0], bucket_edges=(0.0, 50.0, 25.0))


# ---- report tables -----------------------------------------------------------


TABLE1_REFERENCE = """\
Method      Mode    Avg. FRE  FRE25  FRE50  FRE75
MIND-SSC    Rigid       5.05   1.69   2.20   3.31
MIND-SSC    Affine      2.01   1.44   1.84   2.29
LC2         Rigid       1.71   1.31   1.56   1.72
LC2         Affine      1.73   1.32   1.67   1.89
DISA-LC2    Rigid       1.82   1.37   1.65   1.80
DISA-LC2    Affine      1.74   1.33   1.58   1.73"""

TABLE3_REFERENCE = """\
Similarity  Search    0-25mm  25-50mm  50-75mm  75-100mm  Time (s)  Num. eval.
MIND-SSC    Local      23.6%     0.0%     0.0%      0.0%       0.4          17
LC2         Local      54.1%    14.0%     0.0%      0.0%       1.9          98
DISA-LC2    Local      70.3%    52.0%    21.1%      5.8%       0.9          70
MIND-SSC    Global     17.9%    14.6%     5.3%     12.0%       1.3       26370
LC2         Global       N/A      N/A      N/A       N/A    948.0*      38740*
DISA-LC2    Global     75.5%    73.2%    65.0%     64.0%       1.8       29250"""


def test_format_table1_reference_values():
    got = format_table1([
        ("MIND-SSC", "Rigid", {"avg": 5.05, "p25": 1.69, "p50": 2.20, "p75": 3.31}),
        ("MIND-SSC", "Affine", {"avg": 2.01, "p25": 1.44, "p50": 1.84, "p75": 2.29}),
        ("LC2", "Rigid", {"avg": 1.71, "p25": 1.31, "p50": 1.56, "p75": 1.72}),
        ("LC2", "Affine", {"avg": 1.73, "p25": 1.32, "p50": 1.67, "p75": 1.89}),
        ("DISA-LC2", "Rigid", {"avg": 1.82, "p25": 1.37, "p50": 1.65, "p75": 1.80}),
        ("DISA-LC2", "Affine", {"avg": 1.74, "p25": 1.33, "p50": 1.58, "p75": 1.73}),
    ])
    assert got == TABLE1_REFERENCE


def test_format_table3_reference_values():
    got = format_table3([
        ("MIND-SSC", "Local", (0.236, 0.0, 0.0, 0.0), 0.4, 17),
        ("LC2", "Local", (0.541, 0.140, 0.0, 0.0), 1.9, 98),
        ("DISA-LC2", "Local", (0.703, 0.520, 0.211, 0.058), 0.9, 70),
        ("MIND-SSC", "Global", (0.179, 0.146, 0.053, 0.120), 1.3, 26370),
        ("LC2", "Global", None, 948.0, 38740, True),
        ("DISA-LC2", "Global", (0.755, 0.732, 0.650, 0.640), 1.8, 29250),
    ])
    assert got == TABLE3_REFERENCE


def test_format_table3_rejects_short_fraction_rows():
    with pytest.raises(DataError, match="four bucket"):
        format_table3([("A", "Local", (0.5, 0.5), 1.0, 10)])


# ---- landmark files ----------------------------------------------------------


def test_landmark_csv_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    lms = LandmarkSet(rng.uniform(-100, 100, (6, 3)))
    path = tmp_path / "lms.csv"
    save_landmarks(lms, path)
    back = load_landmarks(path)
    np.testing.assert_array_equal(back.points, lms.points)


def test_landmark_csv_skips_blank_lines(tmp_path):
    path = tmp_path / "lms.csv"
    path.write_text("1,2,3\n\n4,5,6\n")
    assert len(load_landmarks(path)) == 2


def test_landmark_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2\n")
    with pytest.raises(DataError, match="expected x,y,z"):
        load_landmarks(path)
    path.write_text("1,2,three\n")
    with pytest.raises(DataError, match="non-numeric"):
        load_landmarks(path)
    path.write_text("\n")
    with pytest.raises(DataError, match="no landmarks"):
        load_landmarks(path)
