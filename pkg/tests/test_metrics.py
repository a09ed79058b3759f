import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spkid.errors import BadId, EmptyMatrix, LengthMismatch
from spkid.metrics import (
    ConfusionMatrix,
    confusion_matrix,
    macro_f1_from_predictions,
    precision_recall_f1,
    read_confusion_csv,
    read_metrics_csv,
    write_report,
)
from spkid.trainer import TrainLog


def hand_counted():
    return ConfusionMatrix(np.array([[3, 1], [2, 4]]), ["A", "B"])


class TestConfusion:
    def test_diagonal(self):
        cm = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
        assert np.array_equal(cm.counts, np.diag([1, 1, 2]))
        assert np.trace(cm.counts) == 4

    def test_one_error_in_hundred(self):
        targets = np.repeat(np.arange(10), 10)
        preds = targets.copy()
        preds[37] = 5
        cm = confusion_matrix(preds, targets, 10)
        assert np.trace(cm.counts) == 99 and cm.errors == 1
        assert precision_recall_f1(cm).accuracy == 0.99

    def test_empty_input(self):
        cm = confusion_matrix([], [], 4)
        assert cm.counts.shape == (4, 4) and cm.total == 0

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            confusion_matrix([0, 1], [0], 2)
        with pytest.raises(BadId):
            confusion_matrix([0, 2], [0, 1], 2)
        with pytest.raises(BadId):
            confusion_matrix([0, 1], [-1, 1], 2)


class TestPrecisionRecall:
    def test_hand_counted(self):
        r = precision_recall_f1(hand_counted())
        assert np.allclose(r.precision, [0.6, 0.8], atol=1e-4)
        assert np.allclose(r.recall, [0.75, 0.6667], atol=1e-4)
        assert np.allclose(r.f1, [0.6667, 0.7273], atol=1e-4)
        assert r.macro_f1 == pytest.approx(0.6970, abs=1e-4)
        assert r.accuracy == 0.7

    def test_perfect(self):
        r = precision_recall_f1(ConfusionMatrix(np.diag([5, 5]), ["a", "b"]))
        assert r.macro_f1 == 1.0

    def test_equal_precision_recall_fixpoint(self):
        # 97 of 100 right for both classes: p = r = 0.97
        r = precision_recall_f1(ConfusionMatrix(np.array([[97, 3], [3, 97]]), ["a", "b"]))
        assert np.allclose(r.precision, 0.97) and np.allclose(r.recall, 0.97)
        assert np.allclose(r.f1, 0.97)

    def test_undefined_is_zero_and_flagged(self):
        cm = ConfusionMatrix(np.array([[2, 0, 0], [1, 0, 0], [0, 0, 0]]), ["a", "b", "c"])
        r = precision_recall_f1(cm)
        assert r.precision[1] == 0.0 and r.undefined[1] and r.undefined[2]
        # class c has no support and is left out of the macro average
        assert r.macro_f1 == pytest.approx(np.mean(r.f1[:2]))

    def test_empty(self):
        with pytest.raises(EmptyMatrix):
            precision_recall_f1(ConfusionMatrix(np.zeros((2, 2), dtype=np.int64), ["a", "b"]))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6).flatmap(lambda c: st.tuples(
        st.just(c),
        st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1,
                 max_size=60))))
    def test_properties(self, data):
        c, pairs = data
        preds, targets = zip(*pairs)
        cm = confusion_matrix(preds, targets, c)
        r = precision_recall_f1(cm)
        assert r.support.sum() == len(pairs)
        assert r.accuracy == np.trace(cm.counts) / len(pairs)
        assert np.all(r.f1 <= (r.precision + r.recall) / 2 + 1e-12)
        assert r.macro_f1 == pytest.approx(macro_f1_from_predictions(preds, targets, c), abs=1e-12)

        perm = np.random.default_rng(len(pairs)).permutation(c)
        inv = np.argsort(perm)
        moved = precision_recall_f1(confusion_matrix(inv[list(preds)], inv[list(targets)], c))
        assert np.allclose(moved.f1, r.f1[perm])
        assert np.allclose(moved.precision, r.precision[perm])
        assert moved.macro_f1 == pytest.approx(r.macro_f1)


class TestReport:
    def write(self, out):
        cm = hand_counted()
        log = TrainLog()
        log.record(1, 0.7)
        log.record(2, 0.5, 0.6)
        write_report(precision_recall_f1(cm), cm, log, out)
        return cm

    def test_files_and_shapes(self, tmp_path):
        cm = self.write(tmp_path)
        lines = (tmp_path / "confusion.csv").read_text().splitlines()
        assert len(lines) == cm.n_classes + 1
        assert lines[0] == "true\\pred,A,B"
        assert (tmp_path / "curves.csv").read_text().splitlines()[0] == "step,TL,VL"

    def test_round_trip(self, tmp_path):
        cm = self.write(tmp_path)
        report = precision_recall_f1(cm)
        back = read_metrics_csv(tmp_path / "metrics.csv")
        assert back.labels == report.labels
        # reals are written with 6 decimals
        for name in ("precision", "recall", "f1"):
            assert np.allclose(getattr(back, name), np.round(getattr(report, name), 6), atol=1e-9)
        assert abs(back.macro_f1 - round(report.macro_f1, 6)) < 1e-9
        assert np.array_equal(read_confusion_csv(tmp_path / "confusion.csv").counts, cm.counts)

    def test_byte_identical(self, tmp_path):
        self.write(tmp_path / "a")
        self.write(tmp_path / "b")
        for name in ("metrics.csv", "confusion.csv", "curves.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
