import numpy as np
import pytest

from sslprof.dataio import EmbeddingTable
from sslprof.errors import ValidationError
from sslprof.evaluate import (
    EvalConfig,
    cross_cell_line_eval,
    embedding_collapse_check,
    intra_well_consistency,
    kfold_eval,
    knn_predict,
)


def _table(vectors, keys=None, level="well"):
    vectors = np.asarray(vectors, dtype=np.float32)
    if keys is None:
        keys = [("P1", f"W{i:03d}") for i in range(len(vectors))]
    return EmbeddingTable(keys=keys, vectors=vectors, level=level)


class TestKnnPredict:
    def test_query_on_train_point(self):
        train = np.array([[0.0, 0.0], [5.0, 5.0]])
        assert knn_predict(train, ["a", "b"], np.array([0.0, 0.0]), k=1, metric="euclidean") == "a"

    def test_three_point_majority(self):
        train = np.array([[0.0, 0.0], [0.0, 0.1], [5.0, 5.0]])
        labels = ["a", "a", "b"]
        got = knn_predict(train, labels, np.array([0.2, 0.0]), k=3, metric="euclidean")
        assert got == "a"

    def test_cosine_scale_invariance(self, rng):
        train = rng.standard_normal((10, 4))
        labels = [f"c{i % 3}" for i in range(10)]
        q = rng.standard_normal(4)
        a = knn_predict(train, labels, q, k=3, metric="cosine")
        b = knn_predict(train * 37.0, labels, q * 0.01, k=3, metric="cosine")
        assert a == b

    def test_tie_breaks_by_summed_distance_then_label(self):
        train = np.array([[0.0], [1.0], [10.0], [11.0]])
        labels = ["b", "b", "a", "a"]
        # 2 votes each at k=4; label "b" has the smaller summed distance
        assert knn_predict(train, labels, np.array([2.0]), k=4, metric="euclidean") == "b"
        sym = np.array([[-1.0], [1.0]])
        # perfectly symmetric: falls through to lexicographic order
        assert knn_predict(sym, ["z", "a"], np.array([0.0]), k=2, metric="euclidean") == "a"

    def test_self_accuracy_k1_on_distinct_points(self, rng):
        train = rng.standard_normal((12, 5))
        labels = [f"l{i}" for i in range(12)]
        for i in range(12):
            assert knn_predict(train, labels, train[i], k=1, metric="euclidean") == labels[i]

    def test_k_too_large(self):
        with pytest.raises(ValidationError):
            knn_predict(np.ones((2, 2)), ["a", "b"], np.ones(2), k=3)

    def test_empty_train(self):
        with pytest.raises(ValidationError):
            knn_predict(np.zeros((0, 2)), [], np.ones(2), k=1)


class TestKfoldEval:
    def _separable(self, wells_per_class=6, classes=4):
        rows, keys, labels = [], [], {}
        for c in range(classes):
            for w in range(wells_per_class):
                key = ("P1", f"c{c}w{w}")
                one_hot = np.zeros(classes)
                one_hot[c] = 1.0
                keys.append(key)
                rows.append(one_hot)
                labels[key] = f"class{c}"
        return _table(rows, keys), labels

    def test_separable_is_perfect(self):
        table, labels = self._separable()
        report = kfold_eval(table, labels, EvalConfig(k=3, n_folds=5, seed=1))
        assert report.fold_accuracies == [1.0] * 5
        assert report.mean_accuracy == 1.0

    def test_mean_is_arithmetic_mean(self, rng):
        table, labels = self._separable()
        noisy = _table(
            table.vectors + rng.normal(0, 1.2, table.vectors.shape).astype(np.float32),
            table.keys,
        )
        report = kfold_eval(noisy, labels, EvalConfig(n_folds=4, seed=0))
        assert report.mean_accuracy == float(np.mean(report.fold_accuracies))

    def test_shuffled_labels_hit_chance_level(self):
        rng = np.random.default_rng(0)
        classes, wells_per_class = 4, 16
        table, labels = self._separable(wells_per_class, classes)
        keys = list(labels)
        values = [labels[k] for k in keys]
        accs = []
        for seed in range(20):
            perm = np.random.default_rng(seed).permutation(len(values))
            shuffled = {k: values[i] for k, i in zip(keys, perm)}
            report = kfold_eval(table, shuffled, EvalConfig(n_folds=4, seed=seed))
            accs.append(report.mean_accuracy)
        p = 1.0 / classes
        sigma = np.sqrt(p * (1 - p) / (20 * len(keys)))
        assert abs(np.mean(accs) - p) < 3 * sigma + 0.02

    def test_leave_structured_out_partitions(self):
        table, labels = self._separable(wells_per_class=4, classes=3)
        report = kfold_eval(table, labels, EvalConfig(k=1, n_folds=12, seed=0))
        assert len(report.fold_accuracies) == 12

    def test_row_order_invariance(self, rng):
        table, labels = self._separable()
        noisy = _table(
            table.vectors + rng.normal(0, 0.8, table.vectors.shape).astype(np.float32),
            table.keys,
        )
        perm = rng.permutation(len(noisy.keys))
        shuffled = _table([noisy.vectors[i] for i in perm], [noisy.keys[i] for i in perm])
        a = kfold_eval(noisy, labels, EvalConfig(seed=3, n_folds=4))
        b = kfold_eval(shuffled, labels, EvalConfig(seed=3, n_folds=4))
        assert a.fold_accuracies == b.fold_accuracies

    def test_sparse_class_error_names_class(self):
        table, labels = self._separable(wells_per_class=2, classes=3)
        labels[("P1", "c0w1")] = "lonely"
        labels[("P1", "c0w0")] = "class1"
        with pytest.raises(ValidationError, match="lonely"):
            kfold_eval(table, labels, EvalConfig(n_folds=2, seed=0))

    def test_confusion_counts_total(self):
        table, labels = self._separable(wells_per_class=4, classes=3)
        report = kfold_eval(table, labels, EvalConfig(n_folds=4, seed=0))
        total = sum(sum(row.values()) for row in report.confusion.values())
        assert total == len(labels)


class TestCrossCellLine:
    def _line_tables(self, rng, offset=None):
        classes = 3
        labels = {}
        tables = {}
        base = rng.standard_normal((classes, 4))
        for line in ("A", "B"):
            keys, rows = [], []
            for c in range(classes):
                for w in range(4):
                    key = (f"{line}P", f"c{c}w{w}")
                    vec = base[c] + rng.normal(0, 0.05, 4)
                    if line == "B" and offset is not None:
                        vec = vec + offset
                    keys.append(key)
                    rows.append(vec)
                    labels[key] = f"class{c}"
            tables[line] = _table(rows, keys)
        return tables, labels

    def test_identical_tables_symmetric(self, rng):
        tables, labels = self._line_tables(rng)
        tables["B"] = EmbeddingTable(
            keys=[("BP",) + k[1:] for k in tables["A"].keys],
            vectors=tables["A"].vectors.copy(),
            level="well",
        )
        for key in list(labels):
            if key[0] == "AP":
                labels[("BP",) + key[1:]] = labels[key]
        res = cross_cell_line_eval(tables, labels, EvalConfig(k=3))
        assert res["A->B"] == res["B->A"]
        assert res["A->B"] == 1.0

    def test_constant_offset_centered_recovers_accuracy(self, rng):
        offset = np.full(4, 25.0)
        tables, labels = self._line_tables(rng, offset=offset)
        plain = cross_cell_line_eval(tables, labels, EvalConfig(k=3), center=False)
        centered = cross_cell_line_eval(tables, labels, EvalConfig(k=3), center=True)
        baseline_tables, baseline_labels = self._line_tables(
            np.random.default_rng(1234), offset=None
        )
        baseline = cross_cell_line_eval(baseline_tables, baseline_labels, EvalConfig(k=3))
        assert centered["A->B"] >= baseline["A->B"] - 1e-9
        assert centered["A->B"] >= plain["A->B"]

    def test_single_shared_label_trivial(self, rng):
        tables = {
            "A": _table(rng.random((3, 2)), [("AP", f"w{i}") for i in range(3)]),
            "B": _table(rng.random((3, 2)), [("BP", f"w{i}") for i in range(3)]),
        }
        labels = {k: "only" for t in tables.values() for k in t.keys}
        res = cross_cell_line_eval(tables, labels, EvalConfig(k=1))
        assert res["A->B"] == 1.0 and res["B->A"] == 1.0

    def test_disjoint_labels_rejected(self, rng):
        tables = {
            "A": _table(rng.random((2, 2)), [("AP", "w0"), ("AP", "w1")]),
            "B": _table(rng.random((2, 2)), [("BP", "w0"), ("BP", "w1")]),
        }
        labels = {("AP", "w0"): "x", ("AP", "w1"): "x", ("BP", "w0"): "y", ("BP", "w1"): "y"}
        with pytest.raises(ValidationError):
            cross_cell_line_eval(tables, labels, EvalConfig())


class TestIntraWell:
    def _site_table(self, rows_by_well):
        keys, rows = [], []
        for well, vecs in rows_by_well.items():
            for s, v in enumerate(vecs):
                keys.append(("P1", well, s))
                rows.append(v)
        return _table(rows, keys, level="site")

    def test_identical_sites_give_one(self):
        table = self._site_table({"A01": [[1.0, 2.0]] * 4})
        assert intra_well_consistency(table) == pytest.approx(1.0)

    def test_orthogonal_pair_gives_zero(self):
        table = self._site_table({"A01": [[1.0, 0.0], [0.0, 1.0]]})
        assert intra_well_consistency(table) == pytest.approx(0.0, abs=1e-7)

    def test_known_pairwise_mean(self):
        v1, v2, v3 = np.eye(3)
        mixed = (v1 + v2) / np.sqrt(2)
        table = self._site_table({"A01": [v1, v2, mixed]})
        expected = (0.0 + np.sqrt(0.5) + np.sqrt(0.5)) / 3
        assert intra_well_consistency(table) == pytest.approx(expected, rel=1e-6)

    def test_singleton_well_rejected(self):
        table = self._site_table({"A01": [[1.0, 0.0]]})
        with pytest.raises(ValidationError):
            intra_well_consistency(table)


class TestCollapseCheck:
    def test_identical_rows_flagged(self):
        table = _table(np.tile([0.3, 0.7, 0.1], (8, 1)))
        diag = embedding_collapse_check(table)
        assert diag.collapsed
        assert diag.low_variance_fraction == 1.0

    def test_isotropic_rows_not_flagged(self, rng):
        table = _table(rng.standard_normal((64, 16)))
        diag = embedding_collapse_check(table)
        assert not diag.collapsed
        assert diag.singular_value_fraction > 0.9

    def test_rank_one_fraction(self, rng):
        coeffs = rng.standard_normal(20)
        direction = rng.standard_normal(8)
        table = _table(np.outer(coeffs, direction))
        diag = embedding_collapse_check(table)
        assert diag.singular_value_fraction == pytest.approx(1.0 / 8.0)
