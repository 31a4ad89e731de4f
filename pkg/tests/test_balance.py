"""Balance moments, the design-inverse row, and subspace projections."""

from __future__ import annotations

import numpy as np
import pytest

from matchcal import (
    Dataset,
    InsufficientGroupError,
    SingularDesignError,
    ZeroVarianceError,
    balance_summary,
    included_design,
    inverse_first_block,
    orthogonalize_omitted,
    project,
)
from conftest import (
    numeric_meta,
    perfectly_matched_dataset,
    random_dataset,
    split_partition,
)


class TestBalanceSummary:
    def test_perfect_match_zeroes_everything(self):
        d = perfectly_matched_dataset(np.random.default_rng(0), 8, 3)
        s = balance_summary(d, split_partition(2, 1))
        assert np.allclose(s.mean_diff, 0.0, atol=1e-14)
        assert np.allclose(s.smd, 0.0, atol=1e-13)
        assert np.allclose(s.treat_corr, 0.0, atol=1e-13)
        assert np.allclose(s.treat_corr_omitted, 0.0, atol=1e-13)

    def test_sign_convention(self):
        # treated mean 1, control mean 0: mean_diff = -1, smd positive
        w = np.array([1.0, 1.0, 0.0, 0.0])
        z = np.array([[1.4], [0.6], [0.3], [-0.3]])
        d = Dataset(w, z, numeric_meta(1))
        s = balance_summary(d, split_partition(1, 0))
        assert s.mean_diff[0] == pytest.approx(-1.0)
        sd = np.std(z[:, 0], ddof=1)
        assert s.smd[0] == pytest.approx(1.0 / sd)
        assert s.smd[0] > 0

    def test_corr_proportional_to_smd(self):
        # Pearson correlation against the closed proportionality, computed
        # through two independent paths.
        rng = np.random.default_rng(1)
        d = random_dataset(rng, 8, 12, 3, shift=0.6)
        s = balance_summary(d, split_partition(3, 0))
        n_t, n_c, n = d.n_treated, d.n_control, d.n
        predicted = np.sqrt(n_t * n_c / (n * (n - 1))) * s.smd
        assert np.allclose(s.treat_corr, predicted, atol=1e-12)
        # and the pearson side against numpy's own implementation
        for k in range(3):
            direct = np.corrcoef(d.treatment, d.covariates[:, k])[0, 1]
            assert s.treat_corr[k] == pytest.approx(direct, abs=1e-12)

    def test_corollary_balanced_implies_uncorrelated(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            d = perfectly_matched_dataset(rng, int(rng.integers(3, 10)), 2)
            s = balance_summary(d, split_partition(2, 0))
            assert np.all(np.abs(s.smd) < 1e-12)
            assert np.all(np.abs(s.treat_corr) < 1e-12)

    def test_pooled_scatter_matches_algebraic_form(self):
        # (n_t-1) cov_T + (n_c-1) cov_C against the rank-one-corrected
        # cross-product form, on random data.
        rng = np.random.default_rng(3)
        for _ in range(50):
            d = random_dataset(rng, int(rng.integers(3, 9)), int(rng.integers(3, 9)), 3)
            s = balance_summary(d, split_partition(3, 0))
            z = d.covariates
            w = d.treatment
            n_t, n_c = d.n_treated, d.n_control
            p = z.T @ w
            q = z.sum(axis=0)
            direct = (
                z.T @ z
                + np.outer(p, q) / n_c
                - (1 / n_t + 1 / n_c) * np.outer(p, p)
                + np.outer(q, p) / n_c
                - np.outer(q, q) / n_c
            )
            scale = max(1.0, np.abs(direct).max())
            assert np.allclose(s.pooled_scatter, direct, atol=1e-9 * scale)

    def test_constant_column_names_offender(self):
        w = np.array([1.0, 1.0, 0.0, 0.0])
        z = np.column_stack([np.ones(4) * 3.0, np.arange(4.0)])
        d = Dataset(w, z, numeric_meta(2))
        with pytest.raises(ZeroVarianceError, match="x0"):
            balance_summary(d, split_partition(2, 0))

    def test_small_group_rejected(self):
        w = np.array([1.0, 0.0, 0.0, 0.0])
        d = Dataset(w, np.arange(8.0).reshape(4, 2), numeric_meta(2))
        with pytest.raises(InsufficientGroupError):
            balance_summary(d, split_partition(2, 0))


class TestInverseFirstBlock:
    def test_no_covariates_two_by_two(self):
        d = Dataset(np.array([1.0, 1.0, 0.0, 0.0]), np.zeros((4, 0)), ())
        row = inverse_first_block(d, split_partition(0, 0))
        assert row.treat_treat == pytest.approx(1.0)
        assert row.treat_intercept == pytest.approx(-0.5)
        assert row.treat_covariate.size == 0

    def test_balanced_covariates(self):
        d = perfectly_matched_dataset(np.random.default_rng(4), 6, 2)
        row = inverse_first_block(d, split_partition(2, 0))
        assert row.treat_treat == pytest.approx(1 / 6 + 1 / 6, abs=1e-12)
        assert np.allclose(row.treat_covariate, 0.0, atol=1e-12)

    def test_matches_dense_inverse(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            d = random_dataset(rng, 5, 7, 2, shift=0.5)
            row = inverse_first_block(d, split_partition(2, 0))
            dense = np.linalg.inv(
                included_design(d, split_partition(2, 0)).T
                @ included_design(d, split_partition(2, 0))
            )
            assert np.allclose(row.as_array(), dense[0], rtol=1e-10, atol=1e-13)

    def test_leading_element_positive(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            d = random_dataset(
                rng, int(rng.integers(3, 10)), int(rng.integers(3, 10)), 2, shift=1.0
            )
            assert inverse_first_block(d, split_partition(2, 0)).treat_treat > 0

    def test_duplicate_column_is_singular(self):
        rng = np.random.default_rng(7)
        base = rng.normal(size=10)
        z = np.column_stack([base, base])
        d = Dataset(np.r_[np.ones(5), np.zeros(5)], z, numeric_meta(2))
        with pytest.raises(SingularDesignError) as err:
            inverse_first_block(d, split_partition(2, 0))
        assert "condition" in str(err.value) or "rank" in str(err.value)


class TestProject:
    def test_in_span_target(self):
        rng = np.random.default_rng(8)
        basis = rng.normal(size=(12, 3))
        parallel, orthogonal = project(3.0 * basis[:, 0], basis)
        assert np.allclose(orthogonal, 0.0, atol=1e-12)
        assert np.allclose(parallel, 3.0 * basis[:, 0], atol=1e-12)

    def test_orthogonal_target(self):
        basis = np.zeros((4, 2))
        basis[0, 0] = 1.0
        basis[1, 1] = 1.0
        target = np.array([0.0, 0.0, 2.0, -1.0])
        parallel, orthogonal = project(target, basis)
        assert np.allclose(parallel, 0.0, atol=1e-14)
        assert np.array_equal(orthogonal, target)

    def test_residual_orthogonality_and_reconstruction(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            basis = rng.normal(size=(20, 4))
            target = rng.normal(size=20)
            parallel, orthogonal = project(target, basis)
            for j in range(4):
                bound = 1e-10 * np.linalg.norm(target) * np.linalg.norm(basis[:, j])
                assert abs(orthogonal @ basis[:, j]) <= bound
            assert np.allclose(
                parallel + orthogonal, target, rtol=1e-12, atol=1e-12
            )

    def test_near_dependent_columns_dropped(self):
        rng = np.random.default_rng(10)
        col = rng.normal(size=15)
        basis = np.column_stack([col, col * (1 + 1e-15)])
        target = rng.normal(size=15)
        parallel, orthogonal = project(target, basis)
        expected = col * (col @ target) / (col @ col)
        assert np.allclose(parallel, expected, atol=1e-10)

    def test_zero_target(self):
        basis = np.random.default_rng(11).normal(size=(6, 2))
        parallel, orthogonal = project(np.zeros(6), basis)
        assert np.allclose(parallel, 0.0) and np.allclose(orthogonal, 0.0)


class TestOrthogonalizeOmitted:
    def test_duplicate_of_included_is_absorbed(self):
        rng = np.random.default_rng(12)
        base = rng.normal(size=(14, 2))
        z = np.column_stack([base, base[:, 0]])
        d = Dataset(np.r_[np.ones(7), np.zeros(7)], z, numeric_meta(3))
        residuals, absorbed = orthogonalize_omitted(d, split_partition(2, 1))
        assert absorbed[0]
        assert np.linalg.norm(residuals[:, 0]) < 1e-10 * np.linalg.norm(z[:, 2])

    def test_already_orthogonal_column_unchanged(self):
        rng = np.random.default_rng(13)
        included = rng.normal(size=(16, 2))
        raw = rng.normal(size=16)
        basis = np.column_stack([np.ones(16), included])
        q, _ = np.linalg.qr(basis)
        clean = raw - q @ (q.T @ raw)
        d = Dataset(
            np.r_[np.ones(8), np.zeros(8)],
            np.column_stack([included, clean]),
            numeric_meta(3),
        )
        residuals, absorbed = orthogonalize_omitted(d, split_partition(2, 1))
        assert not absorbed[0]
        assert np.allclose(residuals[:, 0], clean, atol=1e-12)

    def test_residuals_orthogonal_to_basis(self):
        rng = np.random.default_rng(14)
        for _ in range(25):
            d = random_dataset(rng, 8, 10, 5, shift=0.4)
            residuals, _ = orthogonalize_omitted(d, split_partition(3, 2))
            basis = np.column_stack([np.ones(d.n), d.covariates[:, :3]])
            for k in range(2):
                for j in range(basis.shape[1]):
                    bound = (
                        1e-10
                        * np.linalg.norm(d.covariates[:, 3 + k])
                        * np.linalg.norm(basis[:, j])
                    )
                    assert abs(residuals[:, k] @ basis[:, j]) <= bound
