"""Propensity fitting, greedy matching against a brute-force oracle, subsetting."""

from __future__ import annotations

import numpy as np
import pytest

from matchcal import (
    ColumnMeta,
    DataError,
    Dataset,
    EmptyMatchError,
    InsufficientGroupError,
    SeparationError,
    SingularDesignError,
    balance_digest,
    fit_propensity,
    match_caliper,
    match_mahalanobis,
    subset,
    te_variance,
    variance_lower_bound,
)
from conftest import numeric_meta, random_dataset, split_partition


def brute_force_greedy(scores, treatment, threshold):
    """Independent restatement of the greedy protocol: descending score,
    nearest unused control, lowest-index ties, caliper in absolute units."""
    treated = np.flatnonzero(treatment == 1)
    controls = np.flatnonzero(treatment == 0)
    order = sorted(treated, key=lambda i: (-scores[i], i))
    used: set[int] = set()
    pairs, dropped = [], []
    for t in order:
        best, best_distance = None, None
        for c in controls:
            if c in used:
                continue
            distance = abs(scores[t] - scores[c])
            if (
                best_distance is None
                or distance < best_distance
                or (distance == best_distance and c < best)
            ):
                best, best_distance = c, distance
        if best is None or best_distance > threshold:
            dropped.append(int(t))
        else:
            pairs.append((int(t), int(best)))
            used.add(best)
    return pairs, dropped


class TestFitPropensity:
    def test_intercept_only_closed_form(self):
        d = random_dataset(np.random.default_rng(0), 30, 70, 2)
        model = fit_propensity(d, [])
        assert model.converged
        assert model.coefficients[0] == pytest.approx(np.log(30 / 70), abs=1e-8)
        assert np.allclose(model.linear_scores, model.linear_scores[0])

    def test_score_equation_solved(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            d = random_dataset(rng, 40, 60, 3, shift=0.5)
            model = fit_propensity(d, [0, 1, 2])
            design = np.column_stack([np.ones(d.n), d.covariates[:, :3]])
            prob = 1.0 / (1.0 + np.exp(-model.linear_scores))
            assert np.max(np.abs(design.T @ (d.treatment - prob))) < 1e-8

    def test_perfect_separation_detected(self):
        w = np.r_[np.ones(8), np.zeros(8)]
        z = np.r_[np.ones(8) * 3.0, np.zeros(8)][:, None]
        d = Dataset(w, z, numeric_meta(1))
        with pytest.raises(SeparationError):
            fit_propensity(d, [0])

    def test_rank_deficient_terms_rejected(self):
        rng = np.random.default_rng(2)
        col = rng.normal(size=12)
        d = Dataset(
            np.r_[np.ones(6), np.zeros(6)],
            np.column_stack([col, 2.0 * col]),
            numeric_meta(2),
        )
        with pytest.raises(SingularDesignError):
            fit_propensity(d, [0, 1])


class TestMatchCaliper:
    def test_unconstrained_matches_every_treated(self):
        rng = np.random.default_rng(3)
        d = random_dataset(rng, 9, 15, 1)
        result = match_caliper(rng.normal(size=d.n), d, None)
        assert result.n_pairs == 9
        assert result.dropped_treated == ()
        assert len(result.retained) == 18

    def test_far_treated_unit_dropped(self):
        w = np.r_[np.ones(2), np.zeros(3)]
        scores = np.array([0.1, 50.0, 0.0, 0.2, 0.3])
        d = Dataset(w, np.zeros((5, 0)), ())
        result = match_caliper(scores, d, 1.0, raw_units=True)
        assert result.dropped_treated == (1,)
        assert result.n_pairs == 1

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            n = int(rng.integers(2, 11))
            n_t = int(rng.integers(1, n))
            w = np.zeros(n)
            w[rng.permutation(n)[:n_t]] = 1.0
            scores = np.round(rng.normal(size=n), 1)  # coarse grid forces ties
            caliper = float(rng.choice([0.15, 0.5, 1.5, np.inf]))
            d = Dataset(w, np.zeros((n, 0)), ())
            want_pairs, want_dropped = brute_force_greedy(scores, w, caliper)
            try:
                result = match_caliper(
                    scores, d, None if np.isinf(caliper) else caliper, raw_units=True
                )
                got_pairs, got_dropped = list(result.pairs), list(result.dropped_treated)
            except EmptyMatchError:
                got_pairs, got_dropped = [], sorted(np.flatnonzero(w == 1))
            assert got_pairs == want_pairs or sorted(got_pairs) == sorted(want_pairs)
            assert sorted(got_dropped) == sorted(want_dropped)

    def test_without_replacement(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            d = random_dataset(rng, 12, 14, 1)
            result = match_caliper(rng.normal(size=d.n), d, 2.0)
            controls = [c for _, c in result.pairs]
            assert len(controls) == len(set(controls))

    def test_caliper_monotonicity(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            d = random_dataset(rng, 15, 20, 1)
            scores = rng.normal(size=d.n) + 0.8 * d.treatment
            counts = []
            for caliper in np.linspace(0.05, 2.5, 20):
                try:
                    counts.append(match_caliper(scores, d, float(caliper)).n_pairs)
                except EmptyMatchError:
                    counts.append(0)
            assert all(a <= b for a, b in zip(counts, counts[1:]))

    def test_deterministic_result_object(self):
        rng = np.random.default_rng(7)
        d = random_dataset(rng, 10, 12, 2, shift=0.4)
        scores = rng.normal(size=d.n)
        assert match_caliper(scores, d, 1.0) == match_caliper(scores, d, 1.0)

    def test_all_treated_dropped_is_an_error(self):
        w = np.r_[np.ones(2), np.zeros(2)]
        scores = np.array([100.0, 200.0, 0.0, 1.0])
        d = Dataset(w, np.zeros((4, 0)), ())
        with pytest.raises(EmptyMatchError):
            match_caliper(scores, d, 0.5, raw_units=True)

    def test_excess_treated_permitted(self):
        w = np.r_[np.ones(5), np.zeros(2)]
        scores = np.arange(7, dtype=float)
        d = Dataset(w, np.zeros((7, 0)), ())
        result = match_caliper(scores, d, None)
        assert result.n_pairs == 2
        assert len(result.dropped_treated) == 3

    def test_sd_caliper_units(self):
        rng = np.random.default_rng(8)
        d = random_dataset(rng, 10, 10, 1)
        scores = rng.normal(size=d.n)
        in_sd = match_caliper(scores, d, 0.4)
        raw = match_caliper(scores, d, 0.4 * float(np.std(scores, ddof=1)), raw_units=True)
        assert in_sd.pairs == raw.pairs
        assert in_sd.threshold == pytest.approx(raw.threshold)

    def test_json_round_trip(self):
        import json

        rng = np.random.default_rng(9)
        d = random_dataset(rng, 5, 7, 2)
        result = match_caliper(rng.normal(size=d.n), d, 1.2)
        payload = json.loads(json.dumps(result.to_json_dict()))
        assert payload["pairs"] == [list(p) for p in result.pairs]
        assert payload["caliper"] == 1.2
        assert payload["balance_after"]["n_treated"] == result.n_pairs


class TestMatchMahalanobis:
    def test_one_covariate_equals_score_matching(self):
        # all treated values above the control centroid, so both protocols
        # process treated units in the same order
        rng = np.random.default_rng(10)
        n_t, n_c = 7, 11
        w = np.r_[np.ones(n_t), np.zeros(n_c)]
        z = np.r_[rng.normal(2.5, 0.4, n_t), rng.normal(0.0, 1.0, n_c)][:, None]
        d = Dataset(w, z, numeric_meta(1))
        assert z[:n_t, 0].min() > z[n_t:, 0].mean()
        scatter_t = (n_t - 1) * np.var(z[:n_t, 0], ddof=1)
        scatter_c = (n_c - 1) * np.var(z[n_t:, 0], ddof=1)
        pooled_sd = np.sqrt((scatter_t + scatter_c) / (n_t + n_c - 2))
        got = match_mahalanobis(d, [0], 4.0)
        want = match_caliper(z[:, 0] / pooled_sd, d, 4.0, raw_units=True)
        assert sorted(got.pairs) == sorted(want.pairs)
        assert got.n_pairs == n_t

    def test_duplicated_pairs_match_at_zero_distance(self):
        rng = np.random.default_rng(11)
        block = rng.normal(size=(6, 3))
        d = Dataset(
            np.r_[np.ones(6), np.zeros(6)], np.vstack([block, block]), numeric_meta(3)
        )
        result = match_mahalanobis(d, [0, 1, 2], 0.5)
        assert result.n_pairs == 6
        for t, c in result.pairs:
            assert np.array_equal(d.covariates[t], d.covariates[c])

    def test_singular_covariance_suggests_column_reduction(self):
        rng = np.random.default_rng(12)
        col = rng.normal(size=10)
        d = Dataset(
            np.r_[np.ones(5), np.zeros(5)],
            np.column_stack([col, col]),
            numeric_meta(2),
        )
        with pytest.raises(SingularDesignError, match="column"):
            match_mahalanobis(d, [0, 1], 1.0)

    def test_small_instances_match_brute_force(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            n = int(rng.integers(5, 11))
            n_t = int(rng.integers(2, n - 2)) if n >= 5 else 2
            w = np.zeros(n)
            w[rng.permutation(n)[:n_t]] = 1.0
            z = rng.normal(size=(n, 1))
            d = Dataset(w, z, numeric_meta(1))
            try:
                result = match_mahalanobis(d, [0], None)
            except (SingularDesignError, InsufficientGroupError):
                continue
            # independent 1-D restatement: order treated by |z - centroid| desc,
            # nearest unused control by |dz|, lowest index on ties
            treated = np.flatnonzero(w == 1)
            controls = np.flatnonzero(w == 0)
            centroid = z[controls, 0].mean()
            order = sorted(
                range(len(treated)),
                key=lambda i: (-abs(z[treated[i], 0] - centroid), i),
            )
            used: set[int] = set()
            want = []
            for i in order:
                t = treated[i]
                cands = [
                    (abs(z[t, 0] - z[c, 0]), c) for c in controls if c not in used
                ]
                if not cands:
                    continue
                dist, c = min(cands)
                want.append((int(t), int(c)))
                used.add(c)
            assert sorted(result.pairs) == sorted(want)


class TestSubset:
    def test_full_subset_is_identity(self):
        d = random_dataset(np.random.default_rng(14), 6, 8, 3)
        again = subset(d, range(d.n))
        assert np.array_equal(again.covariates, d.covariates)
        assert np.array_equal(again.treatment, d.treatment)
        assert again.column_meta == d.column_meta

    def test_single_pair(self):
        d = random_dataset(np.random.default_rng(15), 4, 4, 2)
        pair = subset(d, [0, 5])
        assert (pair.n_treated, pair.n_control) == (1, 1)

    def test_empty_group_rejected(self):
        d = random_dataset(np.random.default_rng(16), 4, 4, 1)
        with pytest.raises(InsufficientGroupError):
            subset(d, [0, 1])  # both treated

    def test_balance_after_digest_reproduced(self):
        rng = np.random.default_rng(17)
        d = random_dataset(rng, 10, 15, 3, shift=0.7)
        result = match_caliper(rng.normal(size=d.n) + d.treatment, d, 1.5)
        recomputed = balance_digest(subset(d, result.retained))
        assert recomputed == result.balance_after

    def test_matched_subset_variance_floor(self):
        rng = np.random.default_rng(18)
        for _ in range(20):
            d = random_dataset(rng, 10, 18, 2, shift=0.6)
            result = match_caliper(rng.normal(size=d.n) + d.treatment, d, None)
            sample = subset(d, result.retained)
            v = te_variance(sample, split_partition(2, 0), 1.0)
            assert v >= variance_lower_bound(sample.n_treated, sample.n_control, 1.0) - 1e-12
