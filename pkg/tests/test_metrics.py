import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from kidneyseg.errors import AlignmentError, MissingCase, StatError
from kidneyseg.metrics import (
    compare_systems,
    dice,
    evaluate_cohort,
    format_summary,
    mann_whitney_u,
    score_case,
    summarize,
    write_case_csv,
)
from kidneyseg.nifti import write_nifti
from kidneyseg.volume import Volume

from oracles import dice_ref, mwu_enumerate


def labels(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.int64), spacing, (0.0,) * 3, "labels")


# ----------------------------------------------------------------- dice


def test_dice_identical_nonempty():
    m = np.zeros((4, 4, 4), dtype=bool)
    m[1:3, 1:3, 1:3] = True
    assert dice(m, m) == 1.0


def test_dice_disjoint():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    a[0, 0, 0] = True
    b[3, 3, 3] = True
    assert dice(a, b) == 0.0


def test_dice_counts_example():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    a[0, 0, :4] = a[1, 0, :4] = True  # |X| = 8
    b[0, 0, :4] = True  # |Y| = 4, intersection 4
    assert dice(a, b) == pytest.approx(8.0 / 12.0)


def test_dice_empty_conventions():
    z = np.zeros((3, 3, 3), dtype=bool)
    m = z.copy()
    m[1, 1, 1] = True
    assert dice(z, z) == 1.0
    assert dice(m, z) == 0.0
    assert dice(z, m) == 0.0


def test_dice_symmetry_and_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = rng.random((6, 6, 6)) < 0.3
        b = rng.random((6, 6, 6)) < 0.3
        assert dice(a, b) == dice(b, a)
        assert dice(a, b) == pytest.approx(dice_ref(a, b), abs=1e-12)


def test_dice_geometry_mismatch():
    a = labels(np.zeros((4, 4, 4)))
    b = labels(np.zeros((4, 4, 4)), spacing=(2.0, 2.0, 2.0))
    with pytest.raises(AlignmentError):
        dice(a, b)
    with pytest.raises(AlignmentError):
        dice(np.zeros((3, 3, 3)), np.zeros((4, 4, 4)))


# --------------------------------------------------------- Mann-Whitney


def test_mwu_small_example():
    u, p = mann_whitney_u([1, 2], [3, 4])
    assert u == 0.0
    assert p == pytest.approx(2.0 / 6.0, abs=1e-12)


def test_mwu_identical_lists():
    u, p = mann_whitney_u([1, 2, 3], [1, 2, 3])
    assert u == pytest.approx(9.0 / 2.0)
    assert p == 1.0


def test_mwu_matches_enumeration_oracle():
    a = [19.8, 12.3, 15.1, 8.9, 10.0]
    b = [14.2, 20.0, 25.5, 9.2, 16.4]
    u, p = mann_whitney_u(a, b)
    u_ref, p_ref = mwu_enumerate(a, b)
    assert u == pytest.approx(u_ref, abs=1e-12)
    assert p == pytest.approx(p_ref, abs=1e-12)


def test_mwu_u_complement_property():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n1 = int(rng.integers(1, 7))
        n2 = int(rng.integers(1, 7))
        a = rng.integers(0, 5, size=n1).astype(float)
        b = rng.integers(0, 5, size=n2).astype(float)
        u_ab, _ = mann_whitney_u(a, b)
        u_ba, _ = mann_whitney_u(b, a)
        assert u_ab + u_ba == pytest.approx(n1 * n2, abs=1e-9)


def test_mwu_normal_approximation_near_exact():
    rng = np.random.default_rng(8)
    a = rng.normal(0.0, 1.0, size=9)
    b = rng.normal(0.8, 1.0, size=9)  # combined 18 > exact limit
    u, p = mann_whitney_u(a, b)
    u_ref, p_ref = mwu_enumerate(a, b)
    assert u == pytest.approx(u_ref, abs=1e-9)
    assert p == pytest.approx(p_ref, abs=0.05)


def test_mwu_empty_input():
    with pytest.raises(StatError):
        mann_whitney_u([], [1.0])
    with pytest.raises(StatError):
        mann_whitney_u([1.0], [])


# ------------------------------------------------------------ summaries


def test_summarize_constant_list():
    row = summarize([0.9] * 10, seed=1)
    assert row.mean == pytest.approx(0.9)
    assert row.sd == 0.0
    assert row.ci_lo == pytest.approx(0.9) and row.ci_hi == pytest.approx(0.9)


def test_summarize_two_point_sd():
    row = summarize([0.0, 1.0], seed=1)
    assert row.mean == pytest.approx(0.5)
    assert row.sd == pytest.approx(np.sqrt(0.5), abs=1e-12)


def test_summarize_ci_brackets_mean():
    rng = np.random.default_rng(0)
    for seed in range(5):
        values = rng.random(20)
        row = summarize(values, seed=seed)
        assert row.ci_lo <= row.mean <= row.ci_hi


def test_summarize_reproducible():
    values = np.random.default_rng(4).random(15)
    a = summarize(values, seed=123)
    b = summarize(values, seed=123)
    assert (a.ci_lo, a.ci_hi) == (b.ci_lo, b.ci_hi)


def test_summarize_empty():
    with pytest.raises(StatError):
        summarize([])


# --------------------------------------------------------------- cohort


def cube_labels(n=20, par=(4, 12), abn=None):
    data = np.zeros((n, n, n), dtype=np.int64)
    data[par[0]:par[1], par[0]:par[1], par[0]:par[1]] = 1
    if abn:
        data[abn[0]:abn[1], abn[0]:abn[1], abn[0]:abn[1]] = 2
    return labels(data)


def write_cases(directory, cases):
    directory.mkdir(parents=True, exist_ok=True)
    for case_id, vol in cases.items():
        write_nifti(vol, str(directory / f"{case_id}_seg.nii"))


def test_evaluate_identical_dirs(tmp_path):
    cases = {
        "case_a": cube_labels(abn=(8, 10)),
        "case_b": cube_labels(),  # abnormality-free
    }
    write_cases(tmp_path / "pred", cases)
    write_cases(tmp_path / "ref", cases)
    reports, summary = evaluate_cohort(tmp_path / "pred", tmp_path / "ref",
                                       resamples=200)
    assert all(r.parenchyma == 1.0 and r.merged == 1.0 for r in reports)
    by_id = {r.case_id: r for r in reports}
    assert by_id["case_a"].abnormality == 1.0
    assert by_id["case_b"].abnormality is None
    assert summary["abnormality"].n == 1
    assert summary["merged"].mean == 1.0


def test_evaluate_eroded_prediction_matches_counts(tmp_path):
    ref = cube_labels()
    eroded = binary_erosion(ref.data == 1).astype(np.int64)
    write_cases(tmp_path / "pred", {"case_x": labels(eroded)})
    write_cases(tmp_path / "ref", {"case_x": ref})
    reports, _ = evaluate_cohort(tmp_path / "pred", tmp_path / "ref",
                                 resamples=100)
    n_ref = int((ref.data == 1).sum())
    n_pred = int(eroded.sum())
    expected = 2.0 * n_pred / (n_ref + n_pred)
    assert reports[0].parenchyma == pytest.approx(expected, abs=1e-15)
    assert reports[0].merged == pytest.approx(expected, abs=1e-15)


def test_evaluate_missing_case(tmp_path):
    write_cases(tmp_path / "pred", {"case_a": cube_labels()})
    write_cases(tmp_path / "ref", {"case_a": cube_labels(), "case_b": cube_labels()})
    with pytest.raises(MissingCase):
        evaluate_cohort(tmp_path / "pred", tmp_path / "ref")


def test_empty_abnormality_zero_mode():
    pred = cube_labels(abn=(8, 10))  # predicts an abnormality
    ref = cube_labels()  # reference has none
    r = score_case("c", pred, ref, empty_abnormality="zero")
    assert r.abnormality == 0.0
    r = score_case("c", pred, ref, empty_abnormality="exclude")
    assert r.abnormality is None
    r = score_case("c", cube_labels(), ref, empty_abnormality="zero")
    assert r.abnormality == 1.0  # both empty


def test_left_right_columns():
    n = 32
    data = np.zeros((n, n, n), dtype=np.int64)
    data[4:10, 10:20, 10:20] = 1
    data[24:30, 10:20, 10:20] = 1
    ref = labels(data)
    pred_data = data.copy()
    pred_data[24:30, 10:20, 10:20] = 0
    pred_data[23:30, 10:20, 10:20] = 1  # slightly larger left kidney
    r = score_case("c", labels(pred_data), ref)
    assert r.right == 1.0
    assert 0.9 < r.left < 1.0


def test_compare_systems_and_reports(tmp_path):
    a = [score_case("c%d" % i, cube_labels(abn=(8, 10)), cube_labels(abn=(8, 10)))
         for i in range(3)]
    p = compare_systems(a, a)
    assert p["merged"][1] == 1.0
    write_case_csv(tmp_path / "cases.csv", a)
    text = (tmp_path / "cases.csv").read_text()
    assert text.splitlines()[0].startswith("case_id,parenchyma")
    assert len(text.splitlines()) == 4
    _, summary = None, {m: summarize([r.value(m) for r in a], m, resamples=50)
                        for m in ("parenchyma", "merged")}
    table = format_summary(summary)
    assert "parenchyma" in table and "mean" in table
