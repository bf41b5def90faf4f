"""
Tests for confusion matrices, macro F1, per-dataset breakdowns and analysis tables
"""
import itertools

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import f1_score

from config import SynthConfig, SyntheticDatasetSpec
from conftest import random_window_set, tiny_synth_config
from data_loader import build_federation_layout, label_index
from evaluation import (
    MetricError,
    class_distribution,
    column_maxima,
    compare_reports,
    confusion,
    export_embeddings,
    macro_f1,
    per_class_scores,
    per_dataset_breakdown,
    render_comparison,
    write_confusion_csv,
)
from models import build_autoencoder, build_classifier_from_encoder
from synthetic import generate_synthetic_clients


def reference_macro_f1(true, pred):
    """Independent per-class P/R/F1 over the classes present in `true`"""
    scores = []
    for c in sorted(set(true)):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return sum(scores) / len(scores)


class TestConfusion:

    def test_diagonal(self):
        cm = confusion([0, 1, 2], [0, 1, 2])
        assert np.array_equal(cm.counts[:3, :3], np.eye(3, dtype=int))
        assert cm.n == 3

    def test_hand_count(self):
        cm = confusion([0, 0, 1], [0, 1, 1])
        assert (cm.counts[0, 0], cm.counts[0, 1], cm.counts[1, 1]) == (1, 1, 1)
        assert cm.counts.sum() == cm.n == 3
        assert cm.support()[0] == 2

    def test_empty(self):
        cm = confusion([], [])
        assert cm.n == 0
        assert cm.counts.shape == (13, 13)

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            confusion([0, 1], [0])

    def test_out_of_range(self):
        with pytest.raises(MetricError):
            confusion([0, 13], [0, 0])

    def test_csv_has_class_codes(self, tmp_path):
        path = tmp_path / "confusion.csv"
        write_confusion_csv(confusion([0, 3], [0, 3]), str(path))
        df = pd.read_csv(path, index_col=0)
        assert list(df.columns)[:4] == ["W", "U", "D", "ST"]
        assert df.loc["ST", "ST"] == 1


class TestMacroF1:

    def test_perfect(self):
        assert macro_f1(confusion([0, 1, 2, 2], [0, 1, 2, 2])) == 1.0

    def test_hand_computed(self):
        # cm = [[1, 1], [0, 2]]
        cm = confusion([0, 0, 1, 1], [0, 1, 1, 1], n_classes=2)
        assert macro_f1(cm) == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-4)

    def test_single_prediction(self):
        assert macro_f1(confusion([0, 0, 1, 1], [0, 0, 0, 0])) == pytest.approx(1 / 3)

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            macro_f1(confusion([], []))

    def test_absent_classes_excluded(self):
        scores = per_class_scores(confusion([0, 1], [0, 2]))
        assert bool(scores.loc[2, "present"]) is False
        assert np.isnan(scores.loc[2, "f1"])
        assert scores.loc[2, "precision"] == 0.0

    def test_exhaustive_against_reference(self):
        for n in range(1, 6):
            for true in itertools.product(range(3), repeat=n):
                for pred in itertools.product(range(3), repeat=n):
                    assert macro_f1(confusion(true, pred)) == pytest.approx(reference_macro_f1(true, pred), abs=1e-12)

    @pytest.mark.slow
    def test_exhaustive_length_six(self):
        for true in itertools.product(range(3), repeat=6):
            for pred in itertools.product(range(3), repeat=6):
                assert macro_f1(confusion(true, pred)) == pytest.approx(reference_macro_f1(true, pred), abs=1e-12)

    def test_matches_sklearn(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            true = rng.integers(0, 13, size=40)
            pred = rng.integers(0, 13, size=40)
            expected = f1_score(true, pred, labels=np.unique(true), average="macro", zero_division=0)
            assert macro_f1(confusion(true, pred)) == pytest.approx(expected)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        true = rng.integers(0, 5, size=30)
        pred = rng.integers(0, 5, size=30)
        perm = rng.permutation(13)
        assert macro_f1(confusion(perm[true], perm[pred])) == pytest.approx(macro_f1(confusion(true, pred)))

    def test_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            value = macro_f1(confusion(rng.integers(0, 4, size=10), rng.integers(0, 4, size=10)))
            assert 0.0 <= value <= 1.0


@pytest.fixture(scope="module")
def two_tag_layout():
    cfg = tiny_synth_config(tags=("a", "b"))
    return build_federation_layout(generate_synthetic_clients(cfg, seed=9), seed=9)


@pytest.fixture(scope="module")
def classifier():
    return build_classifier_from_encoder(build_autoencoder(seed=0), seed=1)


class TestBreakdown:

    def test_partition_of_test_set(self, two_tag_layout, classifier):
        report = per_dataset_breakdown(classifier, two_tag_layout)
        assert set(report.per_dataset) == {"a", "b"}
        assert sum(report.per_dataset_n.values()) == report.confusion.n == len(two_tag_layout.server_test)

    def test_single_tag_matches_combined(self, classifier):
        layout = build_federation_layout(generate_synthetic_clients(tiny_synth_config(), seed=2), seed=2)
        report = per_dataset_breakdown(classifier, layout)
        assert report.per_dataset["a"] == pytest.approx(report.macro_f1)

    def test_missing_tag(self, two_tag_layout, classifier):
        with pytest.raises(MetricError, match="not in layout"):
            per_dataset_breakdown(classifier, two_tag_layout, tags=["a", "zzz"])

    def test_report_dict(self, two_tag_layout, classifier):
        data = per_dataset_breakdown(classifier, two_tag_layout).to_dict("fl_ae", {"seed": 0})
        assert data["arm"] == "fl_ae"
        assert len(data["combined"]["per_class"]) == 13
        assert np.array(data["confusion"]).shape == (13, 13)
        assert data["metadata"]["macro_average"] == "present_classes"
        absent = [row for row in data["combined"]["per_class"] if row["support"] == 0]
        assert all(row["f1"] is None for row in absent)


class TestAnalysisTables:

    def test_embeddings(self, classifier):
        ws = random_window_set(5, seed=3)
        df = export_embeddings(classifier, ws)
        assert df.shape == (5, 130)
        assert list(df.columns[:3]) == ["client_id", "label", "z0"]
        unlabeled = export_embeddings(classifier, random_window_set(5, seed=3, labels=False))
        assert unlabeled.shape == (5, 129)
        assert np.isfinite(df.filter(like="z").to_numpy()).all()

    def test_embeddings_of_identical_windows(self, classifier):
        ws = random_window_set(1, seed=4)
        ws.windows = np.repeat(ws.windows, 2, axis=0)
        ws.labels = np.repeat(ws.labels, 2)
        df = export_embeddings(classifier, ws)
        np.testing.assert_array_equal(df.iloc[0, 2:].to_numpy(), df.iloc[1, 2:].to_numpy())

    def test_empty_embeddings_rejected(self, classifier):
        with pytest.raises(MetricError):
            export_embeddings(classifier, random_window_set(0))

    def test_class_distribution(self):
        cfg = SynthConfig(datasets=[
            SyntheticDatasetSpec(tag="uci", n_clients=2, classes=["ST", "SD", "W", "U", "D", "L"],
                                 min_windows=30, max_windows=40),
            SyntheticDatasetSpec(tag="rw", n_clients=2, classes=["W", "J", "ST"], min_windows=200, max_windows=250,
                                 class_weights={"J": 0.15}),
        ])
        client_sets = generate_synthetic_clients(cfg, seed=4)
        layout = build_federation_layout(client_sets, seed=4)
        table = class_distribution(layout)
        assert sorted(table.index) == ["rw", "uci"]
        assert int(table.to_numpy().sum()) == sum(len(ws) for ws in client_sets)
        outside = [c for c in table.columns if c not in ("ST", "SD", "W", "U", "D", "L")]
        assert (table.loc["uci", outside] == 0).all()
        rw = table.loc["rw", ["W", "J", "ST"]]
        assert rw.idxmin() == "J"
        assert table.loc["rw", "J"] == sum(int((ws.labels == label_index("J")).sum()) for ws in client_sets[2:])


class TestCompare:

    def make_report(self, arm, combined, a, b):
        return {
            "arm": arm,
            "combined": {"macro_f1": combined},
            "per_dataset": {"a": {"macro_f1": a}, "b": {"macro_f1": b}},
            "confusion": [],
        }

    def test_table_and_maxima(self):
        reports = [
            self.make_report("fl_ae", 0.71, 0.80, 0.40),
            self.make_report("conventional", 0.72, 0.75, 0.40),
            self.make_report("conventional_ae", 0.69, 0.70, 0.55),
        ]
        table = compare_reports(reports)
        assert table.shape == (3, 3)
        assert list(table.columns) == ["Combined", "a", "b"]
        marks = column_maxima(table)
        assert marks["Combined"].tolist() == [False, True, False]
        assert marks["a"].tolist() == [True, False, False]
        text = render_comparison(table)
        assert "**72.00**" in text
        assert "**80.00**" in text
        assert "**55.00**" in text
        assert "71.00" in text and "**71.00**" not in text

    def test_single_report(self):
        table = compare_reports([self.make_report("fl_ae", 0.5, 0.4, 0.6)])
        assert table.shape == (1, 3)

    def test_schema_mismatch(self):
        with pytest.raises(MetricError, match="missing keys"):
            compare_reports([{"arm": "x"}])
        bad = self.make_report("x", 0.1, 0.1, 0.1)
        bad["per_dataset"] = {"c": {"macro_f1": 0.1}}
        with pytest.raises(MetricError, match="tags"):
            compare_reports([self.make_report("y", 0.1, 0.1, 0.1), bad])

    def test_empty(self):
        with pytest.raises(MetricError):
            compare_reports([])
