import math

import numpy as np
import pytest
from scipy import stats
from statsmodels.stats.multitest import multipletests

from oodcal import (
    OOD_LABEL,
    AggregateRow,
    StageReport,
    aggregate,
    emit,
    emit_aggregate,
    evaluate_stage,
    holm_bonferroni,
    load_reports,
    make_stage_report,
    students_t,
)


def test_students_t_hand_value():
    t, p = students_t([1.0, 2.0, 3.0, 4.0], [2.0, 3.0, 4.0, 5.0])
    assert t == pytest.approx(-1.0954451150103321, abs=1e-12)
    assert p == pytest.approx(0.3153335962012298, abs=1e-12)


def test_students_t_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), rng.integers(2, 30))
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), rng.integers(2, 30))
        t, p = students_t(a, b)
        ref = stats.ttest_ind(a, b, equal_var=True)
        assert t == pytest.approx(ref.statistic, abs=1e-6)
        assert p == pytest.approx(ref.pvalue, abs=1e-6)


def test_students_t_degenerate_conventions():
    assert students_t([1.0, 1.0], [1.0, 1.0]) == (0.0, 1.0)
    t, p = students_t([2.0, 2.0], [1.0, 1.0])
    assert t == math.inf and p == 0.0
    t, p = students_t([0.0, 0.0], [1.0, 1.0])
    assert t == -math.inf and p == 0.0


def test_students_t_needs_two_per_side():
    with pytest.raises(ValueError):
        students_t([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        students_t([1.0, 2.0], [])


def test_holm_hand_cases():
    np.testing.assert_allclose(holm_bonferroni([0.01, 0.04]), [0.02, 0.04])
    np.testing.assert_allclose(holm_bonferroni([0.6, 0.6, 0.6]), [1.0, 1.0, 1.0])
    np.testing.assert_allclose(holm_bonferroni([0.05]), [0.05])
    assert holm_bonferroni([]).size == 0


def test_holm_matches_statsmodels():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = rng.uniform(0, 1, rng.integers(1, 12))
        got = holm_bonferroni(p)
        _, ref, _, _ = multipletests(p, method="holm")
        np.testing.assert_allclose(got, ref, atol=1e-12)


def test_holm_properties_and_validation():
    rng = np.random.default_rng(2)
    p = rng.uniform(0, 1, 9)
    adj = holm_bonferroni(p)
    assert np.all(adj >= p)
    assert np.all(adj <= 1.0)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= 0)
    with pytest.raises(ValueError):
        holm_bonferroni([0.5, 1.5])
    with pytest.raises(ValueError):
        holm_bonferroni([np.nan])


def test_make_stage_report_fills_combined_metrics():
    r = make_stage_report(3, 1, 4, "dynamic", 0.9, 0.8, 2.5)
    assert r.total == pytest.approx(0.85)
    assert r.gmean == pytest.approx(math.sqrt(0.72))
    assert r.eta == 2.5
    r2 = make_stage_report(3, 0, 4, "fixed", 0.9, None, 1.0)
    assert r2.total is None and r2.gmean is None


class _StubDetector:
    def __init__(self, preds_id, preds_ood=None):
        self.preds_id = np.asarray(preds_id)
        self.preds_ood = None if preds_ood is None else np.asarray(preds_ood)
        self.calls = 0

    def predict(self, X):
        self.calls += 1
        return self.preds_id if self.calls == 1 else self.preds_ood


def test_evaluate_stage_counts_rejection_as_id_error():
    det = _StubDetector([0, 1, OOD_LABEL, 1], [OOD_LABEL, OOD_LABEL, 0])
    X_id = np.zeros((4, 2))
    y_id = [0, 1, 0, 0]
    acc_id, acc_ood = evaluate_stage(det, X_id, y_id, np.zeros((3, 2)))
    assert acc_id == pytest.approx(0.5)  # row 2 rejected, row 3 mislabeled
    assert acc_ood == pytest.approx(2 / 3)


def test_evaluate_stage_without_ood():
    det = _StubDetector([0, 1])
    acc_id, acc_ood = evaluate_stage(det, np.zeros((2, 2)), [0, 1], None)
    assert acc_id == 1.0 and acc_ood is None
    det2 = _StubDetector([0, 1])
    assert evaluate_stage(det2, np.zeros((2, 2)), [0, 1], np.zeros((0, 2)))[1] is None


def _report_grid():
    # two seeds, two stages, two methods; dynamic beats fixed on acc_ood
    rows = []
    for seed, (f_ood, d_ood) in enumerate([(0.70, 0.90), (0.72, 0.94)]):
        for stage in (0, 1):
            rows.append(make_stage_report(seed, stage, 3 + stage, "fixed", 0.80, f_ood, 1.0))
            rows.append(make_stage_report(seed, stage, 3 + stage, "dynamic", 0.81, d_ood, 2.0))
    return rows


def test_aggregate_means_and_significance():
    rows = aggregate(_report_grid(), baseline="fixed")
    by = {(r.stage, r.method, r.metric): r for r in rows}
    cell = by[(0, "dynamic", "acc_ood")]
    assert cell.mean == pytest.approx(0.92)
    assert cell.std == pytest.approx(np.std([0.90, 0.94], ddof=1))
    assert cell.n_seeds == 2
    t, p = students_t([0.90, 0.94], [0.70, 0.72])
    assert cell.p_value == pytest.approx(p)
    assert by[(0, "fixed", "acc_ood")].p_value is None
    # constant acc_id across seeds: degenerate-but-different means -> p = 0
    assert by[(1, "dynamic", "acc_id")].p_value == 0.0
    # Holm family spans the dynamic method's cells
    fam = sorted(r.p_value for r in rows if r.method == "dynamic" and r.p_value is not None)
    adj = holm_bonferroni(fam)
    got = sorted(r.p_adjusted for r in rows if r.method == "dynamic" and r.p_adjusted is not None)
    np.testing.assert_allclose(got, sorted(adj))


def test_aggregate_single_seed_has_no_pvalue():
    rows = aggregate(
        [
            make_stage_report(0, 0, 3, "fixed", 0.8, 0.7, 1.0),
            make_stage_report(0, 0, 3, "dynamic", 0.8, 0.9, 2.0),
        ]
    )
    assert all(r.p_value is None for r in rows)


def test_emit_csv_round_trip_and_byte_identical(tmp_path):
    reports = _report_grid() + [make_stage_report(5, 0, 3, "fixed", 0.5, None, 1.0)]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    emit(reports, p1, fmt="csv")
    emit(reports, p2, fmt="csv")
    assert p1.read_bytes() == p2.read_bytes()
    header = p1.read_text().splitlines()[0]
    assert header == "seed,stage,n_id_classes,method,acc_id,acc_ood,total,gmean,eta"
    back = load_reports(p1)
    assert len(back) == len(reports)
    for orig, got in zip(reports, back):
        assert got.method == orig.method and got.seed == orig.seed
        assert got.acc_id == pytest.approx(orig.acc_id, abs=1e-6)
        assert (got.acc_ood is None) == (orig.acc_ood is None)


def test_emit_json_round_trip(tmp_path):
    reports = _report_grid()
    path = tmp_path / "r.json"
    emit(reports, path, fmt="json")
    back = load_reports(path)
    assert [r.stage for r in back] == [r.stage for r in reports]
    assert back[0].gmean == pytest.approx(reports[0].gmean, abs=1e-6)
    with pytest.raises(ValueError):
        emit(reports, tmp_path / "r.xml", fmt="xml")


def test_load_reports_rejects_missing_columns(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("seed,stage\n0,0\n")
    with pytest.raises(ValueError, match="lacks columns"):
        load_reports(bad)


def test_emit_aggregate_csv(tmp_path):
    rows = aggregate(_report_grid())
    path = tmp_path / "agg.csv"
    emit_aggregate(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "stage,n_id_classes,method,metric,mean,std,n_seeds,p_value,p_adjusted"
    assert len(lines) == len(rows) + 1
    assert isinstance(rows[0], AggregateRow)


def test_stage_report_is_plain_dataclass():
    r = StageReport(0, 0, 3, "fixed", 0.9, None, None, None, 1.0)
    assert r == StageReport(0, 0, 3, "fixed", 0.9, None, None, None, 1.0)
