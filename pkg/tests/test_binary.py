from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy.stats import binom, chi2

from hetfx import (
    ConfigError,
    DataError,
    MatchedPairSet,
    Split,
    amplify,
    amplify_point,
    assign_pairs,
    binary_estimate,
    binary_joint_test,
    build_conversion_matrix,
    compatible_bracket,
    mcnemar_upper_p,
    tree_from_nested,
    truncated_product,
    worst_case_mean_shift,
    worst_case_variance,
)

OBS_KINDS = ((1, 0), (0, 1), (0, 0), (1, 1))


def binary_pairs(obs, x1=None):
    obs = list(obs)
    rt = np.array([o[0] for o in obs], float)
    rc = np.array([o[1] for o in obs], float)
    cols = {"x1": np.zeros(len(obs)) if x1 is None else np.asarray(x1)}
    return MatchedPairSet(outcome_t=rt, outcome_c=rc, cols_t=cols, cols_c=cols)


def exhaustive_completion_tables(obs):
    """Brute-force oracle over every potential-outcome completion.

    Each pair observes the treated unit's outcome under treatment and the
    control unit's outcome under control; the two unobserved potentials are
    free in {0,1}. For each total unit-level effect (the integer axis), record
    the maximal variance contribution (at assignment probability 1/2) and the
    maximal mean-range contribution.
    """
    per_pair = []
    for rt, rc in obs:
        a = rt - rc
        opts = set()
        for r_ca in (0, 1):
            for r_tb in (0, 1):
                beta = r_tb - r_ca
                opts.add((a + beta, (a - beta) ** 2, abs(a - beta)))
        per_pair.append(sorted(opts))
    best = {}
    for combo in itertools.product(*per_pair):
        d = sum(c[0] for c in combo)
        v = sum(c[1] for c in combo)
        s = sum(c[2] for c in combo)
        bv, bs = best.get(d, (-1, -1))
        best[d] = (max(bv, v), max(bs, s))
    return best


def all_instances(max_pairs):
    for m in range(1, max_pairs + 1):
        for combo in itertools.combinations_with_replacement(
            range(len(OBS_KINDS)), m
        ):
            yield [OBS_KINDS[i] for i in combo]


class TestBinaryEstimate:
    def test_simple_average(self):
        est = binary_estimate(binary_pairs([(1, 0), (0, 0)]))
        assert est.delta_hat == pytest.approx(0.5)

    def test_concordant_pairs_estimate_zero(self):
        est = binary_estimate(binary_pairs([(0, 0), (1, 1), (1, 1)]))
        assert est.delta_hat == 0.0

    def test_matches_count_formula(self):
        rng = np.random.default_rng(41)
        obs = [tuple(rng.integers(0, 2, 2)) for _ in range(100)]
        est = binary_estimate(binary_pairs(obs))
        n10 = sum(1 for o in obs if o == (1, 0))
        n01 = sum(1 for o in obs if o == (0, 1))
        assert est.delta_hat == pytest.approx((n10 - n01) / 100)

    def test_per_group_entries(self):
        pairs = binary_pairs([(1, 0), (1, 0), (0, 1), (0, 0)], x1=[0, 0, 1, 1])
        tree = tree_from_nested(
            {
                "split": Split("x1", threshold=0.5),
                "left": {"n_pairs": 0},
                "right": {"n_pairs": 0},
            }
        )
        est = binary_estimate(assign_pairs(pairs, tree))
        groups = dict((g, (n, d)) for g, n, d in est.per_group)
        assert groups[1] == (4, pytest.approx(1.0))
        assert groups[2] == (4, pytest.approx(-0.5))

    def test_rejects_non_binary(self):
        pairs = MatchedPairSet(
            outcome_t=np.array([0.3, 1.0]),
            outcome_c=np.array([0.0, 0.0]),
            cols_t={"x1": np.zeros(2)},
            cols_c={"x1": np.zeros(2)},
        )
        with pytest.raises(DataError):
            binary_estimate(pairs)


class TestCompatibleBracket:
    def test_paper_example(self):
        assert compatible_bracket(3 / 20, 10) == (
            pytest.approx(1 / 10),
            pytest.approx(2 / 10),
        )

    def test_exactly_compatible(self):
        lo, hi = compatible_bracket(2 / 20, 10)
        assert lo == hi == pytest.approx(1 / 10)

    def test_negative_mirror(self):
        lo, hi = compatible_bracket(-3 / 20, 10)
        assert (lo, hi) == (pytest.approx(-2 / 10), pytest.approx(-1 / 10))

    def test_float_noise_snapped(self):
        lo, hi = compatible_bracket(0.1 + 0.2, 10)  # 0.30000000000000004
        assert lo == hi == pytest.approx(0.3)

    def test_gap_is_zero_or_one_step(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(2, 60)) * 2
            delta0 = float(rng.uniform(-1, 1))
            lo, hi = compatible_bracket(delta0, n)
            assert lo <= delta0 + 1e-12 and delta0 - 1e-12 <= hi
            gap = round((hi - lo) * n)
            assert gap in (0, 1)

    def test_zero_size_rejected(self):
        with pytest.raises(ConfigError):
            compatible_bracket(0.1, 0)


class TestWorstCaseVariance:
    def test_two_forced_pairs(self):
        pairs = binary_pairs([(1, 0), (1, 0)])
        assert worst_case_variance(pairs, 1.0) == 0.0

    def test_exhaustive_oracle_all_small_instances(self):
        for obs in all_instances(5):
            oracle = exhaustive_completion_tables(obs)
            pairs = binary_pairs(obs)
            n = 2 * len(obs)
            for d in range(-n, n + 1):
                if d in oracle:
                    got = worst_case_variance(pairs, d / n)
                    assert got == oracle[d][0], (obs, d)
                    # gamma = 3 makes the bound factor (2p - 1) equal 1/2
                    shift = worst_case_mean_shift(pairs, d / n, gamma=3.0)
                    assert shift == pytest.approx(0.5 * oracle[d][1]), (obs, d)
                else:
                    with pytest.raises(DataError):
                        worst_case_variance(pairs, d / n)

    def test_variance_at_estimate_dominates_plugin(self):
        # at the point estimate the worst-case variance is at least the
        # McNemar-style plug-in 4 T(D-T)/D computed from discordant pairs
        for obs in all_instances(5):
            d_count = sum(1 for o in obs if o[0] != o[1])
            if d_count == 0:
                continue
            t_plus = sum(1 for o in obs if o == (1, 0))
            pairs = binary_pairs(obs)
            delta_hat = binary_estimate(pairs).delta_hat
            got = worst_case_variance(pairs, delta_hat)
            assert got >= 4 * t_plus * (d_count - t_plus) / d_count - 1e-9

    def test_gamma_does_not_change_variance(self):
        pairs = binary_pairs([(1, 0), (0, 1), (0, 0), (1, 1), (1, 0)])
        v1 = worst_case_variance(pairs, 0.1, gamma=1.0)
        v2 = worst_case_variance(pairs, 0.1, gamma=4.0)
        assert v1 == v2

    def test_shift_zero_at_gamma_one(self):
        pairs = binary_pairs([(1, 0), (0, 1), (0, 0)])
        assert worst_case_mean_shift(pairs, 0.0, gamma=1.0) == 0.0

    def test_incompatible_target_rejected(self):
        pairs = binary_pairs([(1, 0), (0, 0)])
        with pytest.raises(DataError):
            worst_case_variance(pairs, 0.3)  # 0.3 * 4 is not an integer

    def test_infeasible_target_rejected(self):
        pairs = binary_pairs([(0, 0), (0, 0)])
        with pytest.raises(DataError):
            worst_case_variance(pairs, 1.0)  # hull is [-2, 2] of 4 units

    def test_bad_gamma(self):
        with pytest.raises(ConfigError):
            worst_case_variance(binary_pairs([(1, 0)]), 0.5, gamma=0.9)


class TestQueryAgainstConvolution:
    def test_medium_instances(self):
        from hetfx.binary import _class_counts_from_obs, _combined_value

        rng = np.random.default_rng(43)
        for _ in range(30):
            counts = tuple(int(v) for v in rng.integers(0, 21, 3))
            mp, mz, mm = counts
            if mp + mz + mm == 0:
                continue
            lo, hi = -(2 * mm + mz), 2 * mp + mz
            targets = np.arange(lo - 2, hi + 3)
            for kind in ("variance", "shift"):
                got = _combined_value(counts, targets, kind)
                want = _convolution_oracle(counts, targets, kind)
                np.testing.assert_array_equal(got, want)


def _convolution_oracle(counts, targets, kind):
    mp, mz, mm = counts

    def pm(m, t):
        t = abs(t)
        if t > 2 * m:
            return -np.inf
        if kind == "variance":
            return 4 * m - 3 * t + 2 * (t // 2)
        return 2 * m - t

    def zero(m, t):
        if abs(t) > m:
            return -np.inf
        return m - ((m - abs(t)) % 2)

    out = np.full(len(targets), -np.inf)
    for k, t in enumerate(targets):
        for tp in range(0, 2 * mp + 1):
            for tm in range(-2 * mm, 1):
                v = pm(mp, tp) + pm(mm, tm) + zero(mz, t - tp - tm)
                if v > out[k]:
                    out[k] = v
    return out


class TestMcNemar:
    def test_exact_tail(self):
        obs = [(1, 0)] * 8 + [(0, 1)] * 2 + [(0, 0)] * 5
        p = mcnemar_upper_p(binary_pairs(obs), gamma=1.0)
        assert p == pytest.approx(56 / 1024, abs=1e-12)

    def test_no_treated_positive(self):
        obs = [(0, 1)] * 4 + [(1, 1)]
        assert mcnemar_upper_p(binary_pairs(obs)) == 1.0

    def test_no_discordant_warns(self):
        obs = [(0, 0), (1, 1)]
        with pytest.warns(UserWarning):
            assert mcnemar_upper_p(binary_pairs(obs)) == 1.0

    def test_monotone_in_gamma(self):
        obs = [(1, 0)] * 12 + [(0, 1)] * 3 + [(0, 0)] * 4
        pairs = binary_pairs(obs)
        ps = [mcnemar_upper_p(pairs, gamma=g) for g in (1.0, 1.1, 1.2, 2.0)]
        assert ps == sorted(ps)

    def test_normal_tail_close_to_exact(self):
        obs = [(1, 0)] * 640 + [(0, 1)] * 560
        pairs = binary_pairs(obs)
        approx = mcnemar_upper_p(pairs, gamma=1.1)
        pbar = 1.1 / 2.1
        exact = float(binom.sf(639, 1200, pbar))
        assert approx == pytest.approx(exact, abs=1e-3)


class TestTruncatedProduct:
    def test_all_above_truncation(self):
        assert truncated_product([0.5, 0.9, 0.31], truncation=0.3) == 1.0

    def test_single_p_closed_form(self):
        p = truncated_product([0.01], truncation=0.2, mc_reps=200_000)
        assert p == pytest.approx(0.01, abs=2e-3)

    def test_truncation_one_is_fisher(self):
        rng = np.random.default_rng(44)
        ps = rng.uniform(0.001, 0.4, 5)
        got = truncated_product(ps, truncation=1.0, mc_reps=200_000)
        fisher = float(chi2.sf(-2 * np.log(ps).sum(), 2 * ps.size))
        assert got == pytest.approx(fisher, abs=5e-3)

    def test_deterministic(self):
        ps = [0.04, 0.3, 0.01]
        a = truncated_product(ps, seed=7)
        b = truncated_product(ps, seed=7)
        assert a == b

    def test_validation(self):
        with pytest.raises(ConfigError):
            truncated_product([])
        with pytest.raises(ConfigError):
            truncated_product([0.5], truncation=0.0)
        with pytest.raises(ConfigError):
            truncated_product([1.5])


class TestAmplification:
    def test_paper_points(self):
        assert amplify_point(2.11, 2.0) == pytest.approx(1.270, abs=1e-3)
        assert amplify_point(1.434, 1.5) == pytest.approx(1.074, abs=1e-3)

    def test_no_treatment_association(self):
        for delta in (1.0, 2.0, 10.0):
            assert amplify_point(1.0, delta) == 1.0

    def test_curve_round_trip(self):
        curve = amplify(1.25)
        assert len(curve) > 10
        for lam, delta in curve:
            assert amplify_point(lam, delta) == pytest.approx(1.25, abs=1e-9)
            assert lam >= 1.25 - 1e-12 and delta > 1.25

    def test_gamma_bounded_by_components(self):
        rng = np.random.default_rng(45)
        for _ in range(100):
            lam, delta = rng.uniform(1, 8, 2)
            assert amplify_point(lam, delta) <= min(lam, delta) + 1e-12

    def test_validation(self):
        with pytest.raises(ConfigError):
            amplify(0.9)
        with pytest.raises(ConfigError):
            amplify_point(0.5, 2.0)


def gen_binary_outcomes(rng, delta, n):
    """Unit effect is Bernoulli(delta); otherwise potentials are concordant."""
    eff_t = rng.random(n) < delta
    r_t = np.where(eff_t, 1.0, (rng.random(n) < 0.5).astype(float))
    eff_c = rng.random(n) < delta
    r_c = np.where(eff_c, 0.0, (rng.random(n) < 0.5).astype(float))
    return r_t, r_c


def two_leaf_binary(rng, deltas=(0.1, 0.8), n=400):
    rt0, rc0 = gen_binary_outcomes(rng, deltas[0], n)
    rt1, rc1 = gen_binary_outcomes(rng, deltas[1], n)
    pairs = MatchedPairSet(
        outcome_t=np.concatenate([rt0, rt1]),
        outcome_c=np.concatenate([rc0, rc1]),
        cols_t={"x1": np.repeat([0.0, 1.0], n)},
        cols_c={"x1": np.repeat([0.0, 1.0], n)},
    )
    tree = tree_from_nested(
        {
            "split": Split("x1", threshold=0.5),
            "left": {"n_pairs": 0},
            "right": {"n_pairs": 0},
        }
    )
    return assign_pairs(pairs, tree), build_conversion_matrix(tree)


class TestBinaryJointTest:
    def test_rejects_strong_modification(self):
        rng = np.random.default_rng(51)
        pairs, conv = two_leaf_binary(rng, deltas=(0.1, 0.8))
        res = binary_joint_test(pairs, conv, alpha=0.04, gamma_ci=0.01)
        assert res.reject
        assert res.d_min > res.kappa

    def test_accepts_homogeneous_effect(self):
        rng = np.random.default_rng(52)
        pairs, conv = two_leaf_binary(rng, deltas=(0.5, 0.5))
        res = binary_joint_test(pairs, conv, alpha=0.04, gamma_ci=0.01)
        assert not res.reject

    def test_grid_values_are_compatible(self):
        rng = np.random.default_rng(53)
        pairs, conv = two_leaf_binary(rng, deltas=(0.3, 0.6), n=150)
        res = binary_joint_test(pairs, conv)
        n_units = 2 * pairs.n_pairs
        scaled = np.asarray(res.scan_taus) * n_units
        np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-8)
        lo, hi = res.ci
        assert lo <= res.tau_at_min <= hi

    def test_deterministic(self):
        rng = np.random.default_rng(54)
        pairs, conv = two_leaf_binary(rng, deltas=(0.2, 0.7), n=200)
        a = binary_joint_test(pairs, conv, seed=9)
        b = binary_joint_test(pairs, conv, seed=9)
        assert a.d_min == b.d_min and a.tau_at_min == b.tau_at_min

    def test_d_min_monotone_in_gamma(self):
        rng = np.random.default_rng(55)
        pairs, conv = two_leaf_binary(rng, deltas=(0.15, 0.85))
        d_mins = [
            binary_joint_test(pairs, conv, gamma=g, alpha=0.05, gamma_ci=0.0).d_min
            for g in (1.0, 1.3, 1.8)
        ]
        assert d_mins[0] >= d_mins[1] - 1e-9 >= d_mins[2] - 2e-9

    def test_gamma_widens_interval(self):
        rng = np.random.default_rng(56)
        pairs, conv = two_leaf_binary(rng, deltas=(0.4, 0.6), n=250)
        base = binary_joint_test(pairs, conv, gamma=1.0, gamma_ci=0.05)
        wide = binary_joint_test(pairs, conv, gamma=1.5, gamma_ci=0.05)
        assert wide.ci[0] <= base.ci[0] and wide.ci[1] >= base.ci[1]


class TestBracketConvergence:
    def test_p_value_gap_shrinks(self):
        """Bracketing vanishes asymptotically: the larger the group, the
        closer the two compatible-value tests."""
        from scipy.special import ndtr

        delta0 = 1 / 3  # never exactly compatible, so brackets stay apart
        gaps = []
        for i_g in (10, 100, 1000):
            m_plus = round(0.4 * i_g)
            m_minus = round(0.05 * i_g)
            obs = (
                [(1, 0)] * m_plus
                + [(0, 1)] * m_minus
                + [(0, 0)] * (i_g - m_plus - m_minus)
            )
            pairs = binary_pairs(obs)
            n_units = 2 * i_g
            t_stat = 2 * (m_plus - m_minus)
            lo, hi = compatible_bracket(delta0, n_units)
            p_sides = []
            for side in (lo, hi):
                var = worst_case_variance(pairs, side)
                dev = (t_stat - side * n_units) / np.sqrt(var)
                p_sides.append(2 * float(ndtr(-abs(dev))))
            gaps.append(abs(p_sides[0] - p_sides[1]))
        assert gaps[0] > gaps[1] > gaps[2]
