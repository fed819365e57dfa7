import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from avbench.metrics import (
    TABLE3_ROWS,
    EvalReport,
    PredictionMatrix,
    append_run_record,
    dummy_baseline,
    emit_report,
    evaluate,
    table2,
    table3,
    table4,
)


def brute_force_f1(truth, pred):
    """Per-class F1 from explicit confusion counting."""
    n, c = truth.shape
    out = []
    for k in range(c):
        tp = fp = fn = 0
        for i in range(n):
            if truth[i][k] and pred[i][k]:
                tp += 1
            elif pred[i][k]:
                fp += 1
            elif truth[i][k]:
                fn += 1
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        out.append(2 * p * r / (p + r) if p + r else 0.0)
    return out


def _matrix(truth, pred):
    truth = np.asarray(truth, bool)
    return PredictionMatrix(tuple(str(i) for i in range(len(truth))), truth, np.asarray(pred, bool))


bool_pairs = st.integers(1, 30).flatmap(lambda n: st.tuples(
    hnp.arrays(bool, (n, 10)), hnp.arrays(bool, (n, 10))))


class TestEvaluate:
    def test_single_class_half(self):
        r = evaluate(_matrix([[1], [1], [0], [0]], [[1], [0], [1], [0]]))
        assert r.f1[0] == 0.5
        assert (r.tp[0], r.fp[0], r.fn[0]) == (1, 1, 1)

    def test_perfect(self):
        y = np.random.default_rng(0).random((20, 10)) < 0.4
        y[0] = True
        r = evaluate(_matrix(y, y))
        np.testing.assert_array_equal(r.f1, 1.0)
        assert r.macro_f1 == 1.0

    def test_absent_class_scores_zero(self):
        truth = np.zeros((4, 10), bool)
        truth[:, 0] = True
        r = evaluate(_matrix(truth, truth))
        assert r.f1[0] == 1.0
        np.testing.assert_array_equal(r.f1[1:], 0.0)
        assert r.macro_f1 == pytest.approx(0.1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            _matrix(np.zeros((3, 10)), np.zeros((3, 9)))

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(_matrix(np.zeros((0, 10)), np.zeros((0, 10))))

    @settings(max_examples=200, deadline=None)
    @given(bool_pairs)
    def test_matches_brute_force(self, pair):
        truth, pred = pair
        np.testing.assert_allclose(evaluate(_matrix(truth, pred)).f1, brute_force_f1(truth, pred), rtol=0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(bool_pairs, st.permutations(list(range(10))))
    def test_macro_invariant_to_class_permutation(self, pair, perm):
        truth, pred = pair
        a = evaluate(_matrix(truth, pred)).macro_f1
        b = evaluate(_matrix(truth[:, perm], pred[:, perm])).macro_f1
        assert a == pytest.approx(b, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(bool_pairs, hnp.arrays(bool, 10))
    def test_correct_clip_never_hurts(self, pair, row):
        truth, pred = pair
        before = evaluate(_matrix(truth, pred)).f1
        after = evaluate(_matrix(np.vstack([truth, row]), np.vstack([pred, row]))).f1
        assert np.all(after >= before - 1e-15)

    def test_dict_round_trip(self):
        rng = np.random.default_rng(1)
        r = evaluate(_matrix(rng.random((15, 10)) < 0.3, rng.random((15, 10)) < 0.3), {"model": "x"})
        back = EvalReport.from_dict(json.loads(json.dumps(r.to_dict())))
        assert back.f1.tobytes() == r.f1.tobytes()
        assert back.provenance == {"model": "x"}


class TestDummy:
    def test_quarter_prevalence(self):
        truth = np.zeros((4, 10), bool)
        truth[0, 0] = True
        truth[:, 1] = True
        r = dummy_baseline(truth)
        assert r.f1[0] == pytest.approx(0.4)
        assert r.f1[1] == 1.0
        assert r.f1[2] == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 40).flatmap(lambda n: hnp.arrays(bool, (n, 10))))
    def test_closed_form(self, truth):
        p = truth.mean(axis=0)
        assert np.array_equal(dummy_baseline(truth).f1, 2 * p / (1 + p))


def _report(f1s):
    # table tests only read f1, so counts are placeholders
    f1s = np.asarray(f1s, float)
    return EvalReport(f1s, f1s, f1s, np.ones(10, int), np.ones(10, int), np.zeros(10, int),
                      np.zeros(10, int), 10)


class TestTables:
    def test_table2_single_row(self):
        text = table2([("Dummy Baseline", _report([0.2683] * 10))])
        rows = list(csv.reader(io.StringIO(text)))
        assert rows == [["Method", "F1-score (%)"], ["Dummy Baseline", "26.83*"]]

    def test_table2_markers(self):
        text = table2([("a", _report([0.1] * 10)), ("b", _report([0.3] * 10)), ("c", _report([0.2] * 10))],
                      fmt="markdown")
        assert "| b | **30.00** |" in text
        assert "| c | <u>20.00</u> |" in text
        assert "| a | 10.00 |" in text

    def test_table3_single_modalities(self):
        results = {(("audio",), "average"): _report([0.4174] * 10)}
        rows = list(csv.reader(io.StringIO(table3(results, rows=[("audio",), ("visual",), ("speech",)]))))
        assert rows[0][:4] == ["Method", "Average", "Max", "Concat"]
        assert rows[1] == ["Audio", "41.74*"] + ["N/A"] * 5
        assert rows[2][1:] == ["N/A"] * 6

    def test_table3_full_shape(self):
        results = {}
        for mods in TABLE3_ROWS:
            for col in ("average", "max", "concat", "2:1:1", "1:2:1", "1:1:2"):
                results[(mods, col)] = _report([0.5] * 10)
        rows = list(csv.reader(io.StringIO(table3(results))))
        assert len(rows) == 8
        assert rows[4][4:] == ["N/A"] * 3
        assert "N/A" not in rows[7]

    def test_table4_shape(self):
        text = table4({"A": _report(np.linspace(0, 0.9, 10)), "B": _report([0.5] * 10)})
        rows = list(csv.reader(io.StringIO(text)))
        assert len(rows) == 12
        assert rows[1][0] == "Absence or Avoidance of Eye Contact"
        assert rows[-1][0] == "Average"
        assert rows[1][1:] == ["0.00^", "50.00*"]

    def test_deterministic_bytes(self, tmp_path):
        res = [("x", _report([0.25] * 10))]
        a = emit_report(res, "table2", "markdown", tmp_path / "a.md")
        assert (tmp_path / "a.md").read_text() == a == emit_report(res, "table2", "markdown")

    def test_missing_cells_na(self):
        assert "N/A" in table2([("pending", None)])

    def test_run_record(self, tmp_path):
        path = tmp_path / "runs" / "ledger.jsonl"
        append_run_record(path, {"b": 1, "a": 2})
        append_run_record(path, {"c": 3})
        assert path.read_text().splitlines() == ['{"a": 2, "b": 1}', '{"c": 3}']
