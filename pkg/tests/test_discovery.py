"""Sample splitting and tree growing on the discovery half."""

import itertools

import numpy as np
import pytest

from hetfx import (
    ConfigError,
    DataError,
    DiscoveryWarning,
    GrowthConfig,
    MatchedPairSet,
    apply_split,
    grow,
    grow_cart,
    grow_ct,
    growth_config_from_file,
    split_sample,
)


def pair_set(y_diff, covs, kinds=None, seed=0):
    """Pairs with treated outcome = diff, control outcome = 0."""
    y = np.asarray(y_diff, dtype=float)
    cols = {k: np.asarray(v) for k, v in covs.items()}
    return MatchedPairSet(
        outcome_t=y,
        outcome_c=np.zeros_like(y),
        cols_t=cols,
        cols_c={k: v.copy() for k, v in cols.items()},
        kinds=kinds,
    )


def two_group_pairs(n=200, lo=0.4, hi=0.6, seed=5):
    """Response depends exactly on x1; x2 is a numeric decoy."""
    rng = np.random.default_rng(seed)
    x1 = (np.arange(n) % 2).astype(float)
    x2 = rng.normal(size=n)
    y = np.where(x1 == 0, lo, hi)
    return pair_set(y, {"x1": x1, "x2": x2})


class TestSplitSample:
    def test_quarter_split_counts(self):
        pairs = two_group_pairs(n=100)
        plan = split_sample(pairs, (0.25, 0.75), seed=9)
        assert len(plan.discovery_ids) == 25
        assert len(plan.confirmation_ids) == 75

    def test_ten_ninety_counts(self):
        pairs = two_group_pairs(n=4000)
        plan = split_sample(pairs, (0.10, 0.90), seed=9)
        assert len(plan.discovery_ids) == 400

    def test_floor_when_fraction_is_not_exact(self):
        pairs = two_group_pairs(n=110)
        plan = split_sample(pairs, (0.25, 0.75), seed=1)
        # 27.5 pairs floors to 27
        assert len(plan.discovery_ids) == 27

    def test_partition_is_disjoint_and_complete(self):
        pairs = two_group_pairs(n=101)
        plan = split_sample(pairs, (0.5, 0.5), seed=3)
        disc, conf = set(plan.discovery_ids), set(plan.confirmation_ids)
        assert disc.isdisjoint(conf)
        assert disc | conf == set(pairs.pair_ids)

    def test_same_seed_same_plan(self):
        pairs = two_group_pairs(n=10)
        a = split_sample(pairs, (0.5, 0.5), seed=77)
        b = split_sample(pairs, (0.5, 0.5), seed=77)
        assert a == b

    def test_different_seed_different_plan(self):
        pairs = two_group_pairs(n=200)
        a = split_sample(pairs, (0.5, 0.5), seed=1)
        b = split_sample(pairs, (0.5, 0.5), seed=2)
        assert set(a.discovery_ids) != set(b.discovery_ids)

    def test_bad_ratio(self):
        pairs = two_group_pairs(n=10)
        for ratio in ((0.0, 1.0), (1.0, 0.0), (0.3, 0.6), (-0.2, 1.2)):
            with pytest.raises(ConfigError):
                split_sample(pairs, ratio, seed=0)

    def test_too_few_pairs(self):
        pairs = two_group_pairs(n=2)
        plan = split_sample(pairs, (0.5, 0.5), seed=0)
        assert len(plan.discovery_ids) == 1
        one = pair_set([1.0], {"x1": np.array([0.0])})
        with pytest.raises(DataError):
            split_sample(one, (0.5, 0.5), seed=0)

    def test_apply_split(self):
        pairs = two_group_pairs(n=40)
        plan = split_sample(pairs, (0.25, 0.75), seed=4)
        disc, conf = apply_split(pairs, plan)
        assert disc.n_pairs == 10 and conf.n_pairs == 30
        assert set(disc.pair_ids) == set(plan.discovery_ids)
        assert set(conf.pair_ids) == set(plan.confirmation_ids)

    def test_apply_split_wrong_data(self):
        pairs = two_group_pairs(n=40)
        plan = split_sample(pairs, (0.25, 0.75), seed=4)
        other = two_group_pairs(n=30)
        with pytest.raises(DataError):
            apply_split(other, plan)


def sse_gain_oracle(pairs, min_leaf):
    """Exhaustive best first split by between-group sum of squares.

    Numeric covariates try every midpoint; categorical covariates try every
    proper subset of levels. Returns (gain, covariate, rule) with the same
    tie order the grower promises: covariate name, then threshold.
    """
    y = pairs.differences()
    n = y.size
    best = (0.0, None, None)
    for name in sorted(pairs.covariate_names):
        x = pairs.pair_covariate(name)
        if pairs.kinds[name] == "categorical":
            levels = sorted(set(x.tolist()))
            subsets = []
            for r in range(1, len(levels)):
                subsets.extend(itertools.combinations(levels, r))
            rules = [(frozenset(s), np.isin(x, list(s))) for s in subsets]
        else:
            xv = x.astype(float)
            cuts = np.unique(xv)
            rules = [
                (float((a + b) / 2), xv <= (a + b) / 2)
                for a, b in zip(cuts[:-1], cuts[1:])
            ]
        for rule, mask in rules:
            nl = int(mask.sum())
            if nl < min_leaf or n - nl < min_leaf:
                continue
            sl, sr = y[mask].sum(), y[~mask].sum()
            gain = sl**2 / nl + sr**2 / (n - nl) - y.sum() ** 2 / n
            if gain > best[0] + 1e-12:
                best = (gain, name, rule)
    return best


class TestGrowCart:
    def test_two_group_data_single_split(self):
        pairs = two_group_pairs(n=200)
        config = GrowthConfig(min_leaf_pairs=25)
        tree = grow_cart(pairs, config)
        assert tree.n_leaves == 2
        root = tree.root
        assert root.split.covariate == "x1"
        assert root.split.threshold == pytest.approx(0.5)
        gain, name, rule = sse_gain_oracle(pairs, 25)
        assert name == "x1" and rule == pytest.approx(0.5)
        # leaf estimates are the group means, left child first
        assert tree.nodes[root.left].estimate == pytest.approx(0.4)
        assert tree.nodes[root.right].estimate == pytest.approx(0.6)

    def test_first_split_matches_oracle_on_random_data(self):
        rng = np.random.default_rng(14)
        n = 120
        covs = {
            "a": rng.normal(size=n),
            "b": rng.integers(0, 2, n).astype(float),
            "c": np.array(list("pqr"))[rng.integers(0, 3, n)].astype(object),
        }
        y = rng.normal(size=n) + 1.5 * (covs["a"] > 0.3)
        pairs = pair_set(y, covs)
        config = GrowthConfig(min_leaf_pairs=20, max_depth=1, cv_folds=2)
        tree = grow_cart(pairs, config)
        gain, name, rule = sse_gain_oracle(pairs, 20)
        assert not tree.root.is_leaf
        assert tree.root.split.covariate == name
        if isinstance(rule, float):
            assert tree.root.split.threshold == pytest.approx(rule)
        else:
            assert tree.root.split.left_levels == rule

    def test_categorical_subset_split(self):
        n = 300
        grp = np.array(list("abc"))[np.arange(n) % 3].astype(object)
        y = np.where(grp == "a", 0.0, 1.0)
        pairs = pair_set(y, {"grp": grp})
        tree = grow_cart(pairs, GrowthConfig(min_leaf_pairs=25))
        assert tree.n_leaves == 2
        assert tree.root.split.left_levels == frozenset({"a"})
        gain, name, rule = sse_gain_oracle(pairs, 25)
        assert rule == frozenset({"a"})

    def test_pure_noise_is_root_only_in_most_seeds(self):
        root_only = 0
        for seed in range(40):
            rng = np.random.default_rng(seed)
            n = 200
            covs = {
                "x1": rng.integers(0, 2, n).astype(float),
                "x2": rng.normal(size=n),
            }
            pairs = pair_set(rng.normal(size=n), covs)
            tree = grow_cart(pairs, GrowthConfig(min_leaf_pairs=25))
            root_only += tree.n_leaves == 1
        assert root_only >= 36

    def test_constant_responses_warn_no_structure(self):
        pairs = pair_set(np.full(60, 0.25), {"x": np.arange(60.0)})
        with pytest.warns(DiscoveryWarning, match="no structure"):
            tree = grow_cart(pairs, GrowthConfig(min_leaf_pairs=5))
        assert tree.n_leaves == 1
        assert tree.root.estimate == pytest.approx(0.25)

    def test_min_leaf_respected(self):
        rng = np.random.default_rng(8)
        n = 160
        covs = {"x": rng.normal(size=n)}
        y = rng.normal(size=n) + 2.0 * (covs["x"] > 0)
        pairs = pair_set(y, covs)
        config = GrowthConfig(min_leaf_pairs=30, max_depth=4, cv_folds=5)
        tree = grow_cart(pairs, config)
        for leaf in tree.leaf_ids:
            assert tree.nodes[leaf].n_pairs >= 30

    def test_pair_order_does_not_matter(self):
        rng = np.random.default_rng(21)
        n = 150
        covs = {
            "x1": rng.integers(0, 2, n).astype(float),
            "x2": rng.normal(size=n),
            "grp": np.array(list("uvw"))[rng.integers(0, 3, n)].astype(object),
        }
        y = rng.normal(size=n) + (covs["x1"] == 1) + (covs["x2"] > 1)
        pairs = pair_set(y, covs)
        config = GrowthConfig(min_leaf_pairs=15)
        tree = grow_cart(pairs, config)
        perm = rng.permutation(n)
        tree_perm = grow_cart(pairs.subset(perm), config)
        assert tree.to_json() == tree_perm.to_json()

    def test_equal_gain_breaks_tie_by_name(self):
        x = (np.arange(100) % 2).astype(float)
        y = x * 1.0
        pairs = pair_set(y, {"m": x, "k": x.copy()})
        tree = grow_cart(pairs, GrowthConfig(min_leaf_pairs=10))
        assert tree.root.split.covariate == "k"

    def test_complexity_grid_override(self):
        pairs = two_group_pairs(n=200)
        config = GrowthConfig(min_leaf_pairs=25, complexity_grid=(1e9,))
        tree = grow_cart(pairs, config)
        assert tree.n_leaves == 1

    def test_non_shared_covariates_are_not_split_on(self):
        n = 100
        y = (np.arange(n) % 2).astype(float)
        shared = (np.arange(n) % 2).astype(float)
        cols_t = {"good": shared, "leaky": y.copy()}
        cols_c = {"good": shared.copy(), "leaky": np.full(n, -1.0)}
        pairs = MatchedPairSet(
            outcome_t=y,
            outcome_c=np.zeros(n),
            cols_t=cols_t,
            cols_c=cols_c,
        )
        tree = grow_cart(pairs, GrowthConfig(min_leaf_pairs=10))
        assert "leaky" not in tree.split_covariates


def ct_score(y_groups, n_tr, n_est):
    """Reference honest score for a fixed partition of responses."""
    c = 1.0 / n_tr + 1.0 / n_est
    first = sum(len(g) * np.mean(g) ** 2 for g in y_groups) / n_tr
    penalty = c * sum(np.var(g, ddof=1) for g in y_groups)
    return first - penalty


class TestGrowCt:
    def test_two_group_data_single_split(self):
        pairs = two_group_pairs(n=200)
        tree = grow_ct(pairs, GrowthConfig(method="CT", min_leaf_pairs=25))
        assert tree.n_leaves == 2
        assert tree.root.split.covariate == "x1"
        assert tree.root.split.threshold == pytest.approx(0.5)

    def test_homogeneous_leaf_never_split(self):
        # every candidate split leaves the group means at zero, so the
        # variance penalty strictly dominates
        n = 80
        y = np.tile([1.0, -1.0], n // 2)
        x1 = ((np.arange(n) // 2) % 2).astype(float)
        x2 = np.arange(n, dtype=float)
        pairs = pair_set(y, {"x1": x1, "x2": x2})
        config = GrowthConfig(
            method="CT", min_leaf_pairs=8, honest_fraction_hint=0.75
        )
        tree = grow_ct(pairs, config)
        assert tree.n_leaves == 1

        # white-box check of the score comparison for the x1 split
        n_est = n * 0.75 / 0.25
        whole = ct_score([y], n, n_est)
        split = ct_score([y[x1 == 0], y[x1 == 1]], n, n_est)
        assert split < whole

    def test_hint_controls_penalty(self):
        # weak signal: generous confirmation share keeps the split, a tiny
        # one prunes it away
        rng = np.random.default_rng(3)
        n = 400
        x1 = (np.arange(n) % 2).astype(float)
        y = rng.normal(size=n) * 0.8 + 0.25 * x1
        pairs = pair_set(y, {"x1": x1})
        big = grow_ct(
            pairs,
            GrowthConfig(method="CT", min_leaf_pairs=25, honest_fraction_hint=0.75),
        )
        small = grow_ct(
            pairs,
            GrowthConfig(method="CT", min_leaf_pairs=25, honest_fraction_hint=0.02),
        )
        assert big.n_leaves >= small.n_leaves

    def test_pair_order_does_not_matter(self):
        rng = np.random.default_rng(29)
        n = 180
        covs = {
            "x1": rng.integers(0, 2, n).astype(float),
            "x2": rng.normal(size=n),
        }
        y = rng.normal(size=n) + 0.8 * covs["x1"]
        pairs = pair_set(y, covs)
        config = GrowthConfig(method="CT", min_leaf_pairs=20)
        tree = grow_ct(pairs, config)
        tree_perm = grow_ct(pairs.subset(rng.permutation(n)), config)
        assert tree.to_json() == tree_perm.to_json()

    def test_constant_responses_warn(self):
        pairs = pair_set(np.zeros(60), {"x": np.arange(60.0)})
        with pytest.warns(DiscoveryWarning, match="no structure"):
            tree = grow_ct(pairs, GrowthConfig(method="CT", min_leaf_pairs=5))
        assert tree.n_leaves == 1


class TestConfig:
    def test_defaults(self):
        config = GrowthConfig()
        assert config.method == "CART"
        assert config.min_leaf_pairs == 25
        assert config.max_depth == 5
        assert config.cv_folds == 10

    def test_validation(self):
        with pytest.raises(ConfigError):
            GrowthConfig(min_leaf_pairs=1)
        with pytest.raises(ConfigError):
            GrowthConfig(cv_folds=1)
        with pytest.raises(ConfigError):
            GrowthConfig(method="forest")
        with pytest.raises(ConfigError):
            GrowthConfig(complexity_grid=(0.5, 0.1))
        with pytest.raises(ConfigError):
            GrowthConfig(complexity_grid=(-1.0,))
        with pytest.raises(ConfigError):
            GrowthConfig(honest_fraction_hint=1.0)
        with pytest.raises(ConfigError):
            GrowthConfig(max_depth=-1)

    def test_grow_dispatches_on_method(self):
        pairs = two_group_pairs(n=200)
        cart = grow(pairs, GrowthConfig(min_leaf_pairs=25))
        ct = grow(pairs, GrowthConfig(method="CT", min_leaf_pairs=25))
        assert cart.to_json() == grow_cart(pairs, GrowthConfig()).to_json()
        assert ct.to_json() == grow_ct(pairs, GrowthConfig(method="CT")).to_json()

    def test_config_from_json_file(self, tmp_path):
        path = tmp_path / "growth.json"
        path.write_text(
            '{"method": "CT", "min_leaf_pairs": 10, "honest_fraction_hint": 0.9}\n'
        )
        config = growth_config_from_file(path)
        assert config.method == "CT"
        assert config.min_leaf_pairs == 10
        assert config.honest_fraction_hint == 0.9
        assert config.max_depth == 5

    def test_config_from_toml_file(self, tmp_path):
        path = tmp_path / "growth.toml"
        path.write_text('method = "CART"\nmin_leaf_pairs = 30\nmax_depth = 3\n')
        config = growth_config_from_file(path)
        assert config.method == "CART"
        assert config.min_leaf_pairs == 30
        assert config.max_depth == 3

    def test_config_file_unknown_key(self, tmp_path):
        path = tmp_path / "growth.json"
        path.write_text('{"min_leaf": 10}\n')
        with pytest.raises(ConfigError):
            growth_config_from_file(path)


class TestDepthAndStructure:
    def test_two_level_structure_recovered(self):
        # tau depends on x1 and, inside x1=1, on x2
        rng = np.random.default_rng(100)
        n = 1200
        x1 = rng.integers(0, 2, n).astype(float)
        x2 = rng.integers(0, 2, n).astype(float)
        tau = np.where(x1 == 0, 0.0, np.where(x2 == 0, 1.0, 2.5))
        y = rng.normal(size=n) * 0.5 + tau
        pairs = pair_set(y, {"x1": x1, "x2": x2})
        tree = grow_cart(pairs, GrowthConfig(min_leaf_pairs=25))
        assert "x1" in tree.split_covariates
        assert "x2" in tree.split_covariates
        assert tree.n_leaves >= 3

    def test_max_depth_zero_is_root_only(self):
        pairs = two_group_pairs(n=100)
        tree = grow_cart(pairs, GrowthConfig(min_leaf_pairs=10, max_depth=0))
        assert tree.n_leaves == 1
        assert tree.root.n_pairs == 100
