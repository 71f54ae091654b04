import numpy as np
import pytest

from latefuse.preprocess import (
    PreprocessConfig,
    PreprocessError,
    filter_sparse,
    fit_preprocessor,
    impute_knn,
    normalize,
    prune_correlated,
    smote_balance,
    smote_balance_tables,
    variance_topk,
)

from conftest import make_table

CFG = PreprocessConfig()


class TestFilterSparse:
    def test_majority_missing_dropped(self):
        col = np.array([np.nan] * 6 + [1.0] * 4)
        table = make_table(values=np.column_stack([col, np.arange(10.0) + 1]))
        out = filter_sparse(table, CFG)
        assert out.feature_names == [table.feature_names[1]]

    def test_zero_fraction_boundary_is_strict(self):
        # 9/10 observed zeros == 0.9, not strictly above the threshold
        col = np.array([0.0] * 9 + [1.0])
        table = make_table(values=np.column_stack([col, np.arange(10.0) + 1]))
        out = filter_sparse(table, CFG)
        assert out.n_features == 2

    def test_dense_nonzero_kept(self):
        table = make_table(values=np.arange(20.0).reshape(10, 2) + 1)
        assert filter_sparse(table, CFG).n_features == 2

    def test_all_dropped_errors(self):
        table = make_table(values=np.full((10, 2), np.nan))
        with pytest.raises(PreprocessError, match="empty modality after sparsity filter"):
            filter_sparse(table, CFG)


class TestPruneCorrelated:
    def test_identical_columns_drop_second(self):
        x = np.arange(10.0)
        table = make_table(values=np.column_stack([x, x]))
        out = prune_correlated(table, CFG)
        assert out.feature_names == [table.feature_names[0]]

    def test_anticorrelated_drop_second(self):
        x = np.arange(10.0)
        table = make_table(values=np.column_stack([x, -x]))
        out = prune_correlated(table, CFG)
        assert out.feature_names == [table.feature_names[0]]

    def test_three_mutually_correlated_keep_first(self, rng):
        # greedy trace: b dropped against a, c dropped against a
        x = rng.normal(size=30)
        table = make_table(
            values=np.column_stack([x, x + 0.01 * rng.normal(size=30), x * 1.001])
        )
        out = prune_correlated(table, CFG)
        assert out.feature_names == [table.feature_names[0]]

    def test_pairwise_complete_with_missing(self, rng):
        x = rng.normal(size=40)
        y = x.copy()
        y[:5] = np.nan  # correlation computed on the complete pairs
        z = rng.normal(size=40)
        table = make_table(values=np.column_stack([x, y, z]))
        out = prune_correlated(table, CFG)
        assert out.feature_names == [table.feature_names[0], table.feature_names[2]]

    def test_uncorrelated_untouched(self, rng):
        table = make_table(values=rng.normal(size=(50, 4)))
        assert prune_correlated(table, CFG).n_features == 4


class TestVarianceTopK:
    def test_cap_applies_over_trigger(self, rng):
        table = make_table(values=rng.normal(size=(10, 5100)) * rng.uniform(0.1, 3.0, 5100))
        out = variance_topk(table, n_samples=10, cfg=PreprocessConfig(variance_cap=500))
        assert out.n_features == 500

    def test_under_trigger_unchanged(self, rng):
        table = make_table(values=rng.normal(size=(100, 400)))
        out = variance_topk(table, n_samples=100, cfg=CFG)
        assert out.n_features == 400

    def test_keeps_highest_variance(self):
        cols = [
            np.array([0.0, 6.0, 0.0, 6.0]),  # var 9
            np.array([0.0, 2.0, 0.0, 2.0]),  # var 1
            np.array([0.0, 4.0, 0.0, 4.0]),  # var 4
        ]
        table = make_table(values=np.column_stack(cols))
        cfg = PreprocessConfig(variance_cap=2, dimensionality_ratio_trigger=0.1)
        out = variance_topk(table, n_samples=4, cfg=cfg)
        assert out.feature_names == [table.feature_names[0], table.feature_names[2]]


class TestImputeKnn:
    def test_mean_of_donors(self):
        # six training rows identical in observed coordinates; donor mean is 3.0
        train = make_table(
            values=np.array(
                [[0.0, 1.0], [0.0, 2.0], [0.0, 3.0], [0.0, 4.0], [0.0, 5.0], [9.0, 9.0]]
            )
        )
        target = make_table(values=np.array([[0.0, np.nan]]))
        out = impute_knn(train, target, CFG)
        assert out.values[0, 1] == pytest.approx(3.0)

    def test_identity_when_complete(self, rng):
        train = make_table(values=rng.normal(size=(8, 3)))
        out = impute_knn(train, train, CFG)
        np.testing.assert_array_equal(out.values, train.values)

    def test_matches_bruteforce_oracle(self, rng):
        # brute-force oracle: all-pairs scaled euclidean distances by hand
        tv = rng.normal(size=(6, 4))
        train = make_table(values=tv)
        row = rng.normal(size=4)
        row[2] = np.nan
        target = make_table(values=row.reshape(1, 4))
        cfg = PreprocessConfig(knn_k=3)
        out = impute_knn(train, target, cfg)

        sd = tv.std(axis=0)
        dist = np.sqrt((((tv - row) / sd)[:, [0, 1, 3]] ** 2).sum(axis=1))
        nearest = np.argsort(dist, kind="stable")[:3]
        assert out.values[0, 2] == pytest.approx(tv[nearest, 2].mean())

    def test_all_missing_training_feature_errors(self):
        train = make_table(values=np.column_stack([np.full(6, np.nan), np.arange(6.0)]))
        target = make_table(values=np.array([[1.0, np.nan]]))
        with pytest.raises(PreprocessError, match="missing in every training row"):
            impute_knn(train, target, CFG)

    def test_too_few_training_samples_errors(self):
        train = make_table(values=np.arange(6.0).reshape(3, 2))
        with pytest.raises(PreprocessError, match="training samples"):
            impute_knn(train, train, CFG)


class TestNormalize:
    def test_standardize_self(self):
        train = make_table(values=np.array([[2.0], [4.0], [6.0]]))
        out = normalize(train, train, "standardize")
        assert out.values.mean() == pytest.approx(0.0, abs=1e-12)
        assert out.values.std() == pytest.approx(1.0, abs=1e-12)

    def test_cpm_log_row(self):
        train = make_table(values=np.array([[1.0, 0.0, 3.0]]))
        out = normalize(train, train, "cpm_log")
        expected = [np.log2(250001.0), 0.0, np.log2(750001.0)]
        np.testing.assert_allclose(out.values[0], expected, rtol=1e-12)

    def test_constant_column_maps_to_zero(self):
        train = make_table(values=np.full((4, 1), 7.0))
        out = normalize(train, make_table(values=np.array([[9.0]])), "standardize")
        assert out.values[0, 0] == 0.0

    def test_cpm_log_negative_errors(self):
        train = make_table(values=np.array([[1.0, -2.0]]))
        with pytest.raises(PreprocessError, match="nonnegative"):
            normalize(train, train, "cpm_log")

    def test_zero_row_sum_maps_to_zero(self):
        train = make_table(values=np.array([[0.0, 0.0], [1.0, 2.0]]))
        out = normalize(train, train, "cpm_log")
        np.testing.assert_array_equal(out.values[0], [0.0, 0.0])


class TestSmote:
    def test_balanced_is_identity(self, rng):
        X = rng.normal(size=(40, 3))
        y = np.repeat(np.arange(4), 10)
        Xb, yb = smote_balance(X, y, seed=0)
        np.testing.assert_array_equal(Xb, X)
        np.testing.assert_array_equal(yb, y)

    def test_minority_balanced_to_majority(self, rng):
        X = rng.normal(size=(15, 3))
        y = np.array([0] * 10 + [1] * 5)
        Xb, yb = smote_balance(X, y, seed=0)
        assert len(yb) == 20
        assert int(np.sum(yb == 0)) == 10 and int(np.sum(yb == 1)) == 10
        np.testing.assert_array_equal(Xb[:15], X)  # originals first, untouched

    def test_synthetic_on_segment(self):
        X = np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 5.0], [5.1, 5.1], [4.9, 4.9]])
        y = np.array([0, 0, 1, 1, 1])
        Xb, yb = smote_balance(X, y, k=1, seed=3)
        synth = Xb[5:]
        assert (yb[5:] == 0).all()
        for row in synth:
            assert row[0] == pytest.approx(row[1])  # both coordinates equal
            assert 0.0 <= row[0] <= 2.0

    def test_singleton_class_errors(self, rng):
        X = rng.normal(size=(5, 2))
        y = np.array([0, 0, 0, 0, 1])
        with pytest.raises(PreprocessError, match=">=2 samples"):
            smote_balance(X, y, seed=0)

    def test_convex_hull_property(self, rng):
        X = rng.normal(size=(30, 4))
        y = np.array([0] * 20 + [1] * 10)
        Xb, yb = smote_balance(X, y, seed=7)
        minority = X[20:]
        lo, hi = minority.min(axis=0), minority.max(axis=0)
        for row in Xb[30:]:
            assert (row >= lo - 1e-12).all() and (row <= hi + 1e-12).all()

    def test_multimodal_plan_is_shared(self, rng):
        a = make_table("A", rng.normal(size=(12, 3)))
        b = make_table("B", rng.normal(size=(12, 2)))
        y = np.array([0] * 8 + [1] * 4)
        (a2, b2), y2 = smote_balance_tables([a, b], y, seed=5)
        assert a2.n_samples == b2.n_samples == 16
        assert a2.sample_ids == b2.sample_ids
        # each synthetic row interpolates the same source pair in both tables:
        # the concatenated synthetic rows must interpolate concatenated originals
        concat = np.hstack([a.values, b.values])
        concat_synth = np.hstack([a2.values[12:], b2.values[12:]])
        minority = concat[y == 1]
        for row in concat_synth:
            d = np.linalg.norm(minority[:, None, :] - minority[None, :, :], axis=2)
            # the row lies on a segment between two minority points
            found = False
            for i in range(len(minority)):
                for j in range(len(minority)):
                    if i == j:
                        continue
                    ab = minority[j] - minority[i]
                    denom = float(ab @ ab)
                    if denom == 0:
                        continue
                    u = float((row - minority[i]) @ ab) / denom
                    if -1e-9 <= u <= 1 + 1e-9:
                        if np.allclose(minority[i] + u * ab, row, atol=1e-9):
                            found = True
            assert found


class TestFittedPreprocessor:
    def test_train_transform_is_clean_and_standard(self, rng):
        values = rng.normal(size=(20, 6))
        values[rng.uniform(size=values.shape) < 0.1] = np.nan
        values[:, 5] = values[:, 0] * 2.0 + 1e-9  # correlated duplicate column
        table = make_table(values=values)
        fitted = fit_preprocessor(table, CFG)
        out = fitted.transform(table)
        assert not np.isnan(out.values).any()
        np.testing.assert_allclose(out.values.mean(axis=0), 0.0, atol=1e-9)
        sds = out.values.std(axis=0)
        for sd in sds:
            assert sd == pytest.approx(1.0, abs=1e-9) or sd == pytest.approx(0.0, abs=1e-9)

    def test_fit_ignores_test_rows(self, rng):
        train = make_table(values=rng.normal(size=(15, 4)))
        fitted1 = fit_preprocessor(train, CFG)
        fitted2 = fit_preprocessor(train, CFG)
        test_a = make_table(values=rng.normal(size=(5, 4)))
        test_b = make_table(values=rng.normal(size=(5, 4)) * 100.0)
        fitted1.transform(test_a)
        fitted2.transform(test_b)
        assert fitted1.kept_feature_names == fitted2.kept_feature_names
        np.testing.assert_array_equal(
            fitted1.train_imputed.values, fitted2.train_imputed.values
        )

    def test_pipeline_deterministic(self, rng):
        values = rng.normal(size=(18, 5))
        values[rng.uniform(size=values.shape) < 0.15] = np.nan
        table = make_table(values=values)
        out1 = fit_preprocessor(table, CFG).transform(table)
        out2 = fit_preprocessor(table, CFG).transform(table)
        np.testing.assert_array_equal(out1.values, out2.values)
