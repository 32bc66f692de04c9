"""Sample splitting and subgroup discovery trees on pair differences.

The unit of fitting is the matched pair: the response is the within-pair
outcome difference, and candidate split variables are the covariates both
pair members share. Two growing criteria are offered. CART greedily reduces
the residual sum of squares and prunes back with cost-complexity
cross-validation, preferring the smallest tree whose risk sits within a
standard-error band of the minimum. The honest variant (CT) scores a
partition by

    (1/N_tr) * sum_leaves n_l * mean_l^2  -  (1/N_tr + 1/N_est) * sum_leaves var_l

where N_est is the confirmation sample size implied by the planned split
ratio, so the anticipated size of the held-out half tempers how finely the
discovery half is partitioned. Both growers are deterministic: fold
assignment and all tie-breaking depend only on pair ids, never on row order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
import warnings

import numpy as np

from .errors import ConfigError, DataError, DiscoveryWarning
from .model import EffectTree, MatchedPairSet, Split, tree_from_nested

_GAIN_TOL = 1e-12


@dataclass(frozen=True)
class SplitPlan:
    """A reproducible pair-level partition into discovery and confirmation."""

    ratio: tuple
    seed: int
    discovery_ids: tuple
    confirmation_ids: tuple


def split_sample(data: MatchedPairSet, ratio, seed: int) -> SplitPlan:
    """Randomly partition pairs; the discovery share gets floor(f * n) pairs.

    Pairs are never broken apart, and each side always receives at least one
    pair. The same seed always yields the same plan.
    """
    ratio = tuple(float(r) for r in ratio)
    if len(ratio) != 2 or not all(0.0 < r < 1.0 for r in ratio):
        raise ConfigError(f"split ratio must be two fractions in (0,1), got {ratio}")
    if abs(sum(ratio) - 1.0) > 1e-9:
        raise ConfigError(f"split ratio must sum to 1, got {ratio}")
    n = data.n_pairs
    if n < 2:
        raise DataError("need at least 2 pairs to split")
    k = min(max(int(math.floor(ratio[0] * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    ids = data.pair_ids
    disc = sorted(ids[perm[:k]].tolist())
    conf = sorted(ids[perm[k:]].tolist())
    return SplitPlan(
        ratio=ratio, seed=int(seed), discovery_ids=tuple(disc),
        confirmation_ids=tuple(conf),
    )


def plan_to_json(plan: SplitPlan) -> str:
    """Serialize a split plan; ``plan_from_json`` restores it exactly."""
    doc = {
        "format": "hetfx-split",
        "ratio": list(plan.ratio),
        "seed": plan.seed,
        "discovery_ids": list(plan.discovery_ids),
        "confirmation_ids": list(plan.confirmation_ids),
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def plan_from_json(text: str) -> SplitPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"split plan is not valid JSON: {exc}")
    if not isinstance(doc, dict) or doc.get("format") != "hetfx-split":
        raise DataError("not a split plan file (missing format tag)")
    try:
        return SplitPlan(
            ratio=tuple(float(r) for r in doc["ratio"]),
            seed=int(doc["seed"]),
            discovery_ids=tuple(doc["discovery_ids"]),
            confirmation_ids=tuple(doc["confirmation_ids"]),
        )
    except KeyError as exc:
        raise DataError(f"split plan is missing field {exc}")


def apply_split(data: MatchedPairSet, plan: SplitPlan):
    """Materialize (discovery, confirmation) subsets for ``plan``."""
    ids = set(data.pair_ids.tolist())
    disc, conf = set(plan.discovery_ids), set(plan.confirmation_ids)
    if disc | conf != ids or disc & conf:
        raise DataError("split plan does not partition this pair set")
    in_disc = np.array([p in disc for p in data.pair_ids], dtype=bool)
    return data.subset(in_disc), data.subset(~in_disc)


@dataclass(frozen=True)
class GrowthConfig:
    """Hyperparameters shared by both tree growers.

    ``honest_fraction_hint`` is the anticipated confirmation share; only the
    CT criterion uses it. An explicit ``complexity_grid`` replaces the
    data-derived pruning grid.
    """

    method: str = "CART"
    min_leaf_pairs: int = 25
    max_depth: int = 5
    cv_folds: int = 10
    complexity_grid: tuple = ()
    honest_fraction_hint: float = 0.75

    def __post_init__(self):
        if self.method not in ("CART", "CT"):
            raise ConfigError(f"unknown method {self.method!r}; use CART or CT")
        if self.min_leaf_pairs < 2:
            raise ConfigError("min_leaf_pairs must be at least 2")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be nonnegative")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        grid = tuple(float(a) for a in self.complexity_grid)
        object.__setattr__(self, "complexity_grid", grid)
        if any(a < 0 for a in grid) or list(grid) != sorted(grid):
            raise ConfigError("complexity_grid must be nonnegative and ascending")
        if not 0.0 < self.honest_fraction_hint < 1.0:
            raise ConfigError("honest_fraction_hint must be in (0,1)")


def growth_config_from_file(path) -> GrowthConfig:
    """Read a GrowthConfig from a JSON or TOML file."""
    text_path = str(path)
    if text_path.endswith(".toml"):
        data = _read_toml(path)
    elif text_path.endswith(".json"):
        data = _read_json(path)
    else:
        try:
            data = _read_json(path)
        except ConfigError:
            data = _read_toml(path)
    known = {f.name for f in fields(GrowthConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown growth config keys: {sorted(unknown)}")
    if "complexity_grid" in data:
        data["complexity_grid"] = tuple(data["complexity_grid"])
    return GrowthConfig(**data)


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a table of keys")
    return data


def _read_toml(path) -> dict:
    try:
        import tomllib
    except ImportError:                     # Python 3.10
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: not valid TOML: {exc}") from exc


class _CartRisk:
    """Residual sum of squares; pruning risk and split gain in one."""

    def risk(self, n, s, q):
        return q - s * s / n

    def tol(self, q):
        return _GAIN_TOL * (1.0 + q)


class _HonestRisk:
    """Negated honest partition score (lower risk = better partition)."""

    def __init__(self, n_tr: int, confirmation_share: float):
        self.n_tr = max(n_tr, 1)
        n_est = self.n_tr * confirmation_share / (1.0 - confirmation_share)
        self.c = 1.0 / self.n_tr + 1.0 / max(n_est, 1e-12)

    def risk(self, n, s, q):
        var = (q - s * s / n) / np.maximum(n - 1, 1)
        return -(s * s / n) / self.n_tr + self.c * var

    def tol(self, q):
        return _GAIN_TOL * (1.0 + q) / self.n_tr


class _Grower:
    """Deterministic greedy growth + weakest-link pruning on one criterion."""

    def __init__(self, pairs: MatchedPairSet, config: GrowthConfig, crit):
        self.y = pairs.differences().astype(float)
        self.config = config
        self.crit = crit
        order = np.argsort(pairs.pair_ids)
        self.id_rank = np.empty(pairs.n_pairs, dtype=int)
        self.id_rank[order] = np.arange(pairs.n_pairs)
        self.features = []
        for name in pairs.covariate_names:
            t = pairs.covariate(name, "treated")
            c = pairs.covariate(name, "control")
            kind = pairs.kinds[name]
            if kind == "categorical":
                shared = bool(np.all(t == c))
                values = t
            else:
                values = np.asarray(t, dtype=float)
                shared = np.array_equal(
                    values, np.asarray(c, dtype=float), equal_nan=True
                )
            if shared:
                self.features.append((name, kind, values))

    # -- growth ------------------------------------------------------------

    def grow(self, idx: np.ndarray) -> dict:
        idx = np.asarray(idx, dtype=int)
        idx = idx[np.argsort(self.id_rank[idx])]
        return self._build(idx, depth=0, next_id=[0])

    def _node_stats(self, idx):
        yv = self.y[idx]
        return idx.size, float(yv.sum()), float((yv * yv).sum())

    def _build(self, idx, depth, next_id) -> dict:
        n, s, q = self._node_stats(idx)
        node = {
            "id": next_id[0],
            "n_pairs": int(n),
            "estimate": s / n,
            "risk": float(self.crit.risk(float(n), s, q)),
        }
        next_id[0] += 1
        if depth >= self.config.max_depth or n < 2 * self.config.min_leaf_pairs:
            return node
        found = self._best_split(idx, n, s, q)
        if found is None:
            return node
        split, left_idx, right_idx = found
        node["split"] = split
        node["left"] = self._build(
            left_idx[np.argsort(self.id_rank[left_idx])], depth + 1, next_id
        )
        node["right"] = self._build(
            right_idx[np.argsort(self.id_rank[right_idx])], depth + 1, next_id
        )
        return node

    def _best_split(self, idx, n, s, q):
        min_leaf = self.config.min_leaf_pairs
        parent_risk = self.crit.risk(float(n), s, q)
        tol = self.crit.tol(q)
        best_gain, best_split = tol, None
        for name, kind, values in self.features:
            x = values[idx]
            if kind == "categorical":
                cand = self._categorical_candidates(name, x, idx, n, min_leaf)
            else:
                cand = self._numeric_candidates(name, x, idx, n, min_leaf)
            if cand is None:
                continue
            gain, split = cand
            gain = parent_risk - gain
            if gain > best_gain:
                best_gain, best_split = gain, split
        if best_split is None:
            return None
        x = dict((f[0], f[2]) for f in self.features)[best_split.covariate][idx]
        if best_split.threshold is not None:
            mask = x.astype(float) <= best_split.threshold
        else:
            mask = np.isin(x, sorted(best_split.left_levels))
        return best_split, idx[mask], idx[~mask]

    def _numeric_candidates(self, name, x, idx, n, min_leaf):
        order = np.lexsort((self.id_rank[idx], x))
        xs = x[order]
        ys = self.y[idx][order]
        cs = np.cumsum(ys)
        cq = np.cumsum(ys * ys)
        cut = np.flatnonzero(xs[:-1] != xs[1:])
        nl = cut + 1.0
        keep = (nl >= min_leaf) & (n - nl >= min_leaf)
        if not keep.any():
            return None
        cut, nl = cut[keep], nl[keep]
        risk = self.crit.risk(nl, cs[cut], cq[cut]) + self.crit.risk(
            n - nl, cs[-1] - cs[cut], cq[-1] - cq[cut]
        )
        j = int(np.argmin(risk))
        thr = float((xs[cut[j]] + xs[cut[j] + 1]) / 2.0)
        return float(risk[j]), Split(name, threshold=thr)

    def _categorical_candidates(self, name, x, idx, n, min_leaf):
        labels = sorted(set(x.tolist()))
        if len(labels) < 2:
            return None
        stats = []
        for lab in labels:
            members = idx[x == lab]
            members = members[np.argsort(self.id_rank[members])]
            yv = self.y[members]
            stats.append((lab, members.size, float(yv.sum()), float((yv * yv).sum())))
        # order levels by mean response; an L2-optimal subset is then a prefix
        stats.sort(key=lambda t: (t[2] / t[1], t[0]))
        nl = np.cumsum([t[1] for t in stats])[:-1].astype(float)
        sl = np.cumsum([t[2] for t in stats])[:-1]
        ql = np.cumsum([t[3] for t in stats])[:-1]
        total_s = sum(t[2] for t in stats)
        total_q = sum(t[3] for t in stats)
        keep = (nl >= min_leaf) & (n - nl >= min_leaf)
        if not keep.any():
            return None
        risk = self.crit.risk(nl, sl, ql) + self.crit.risk(
            n - nl, total_s - sl, total_q - ql
        )
        risk = np.where(keep, risk, np.inf)
        j = int(np.argmin(risk))
        left = frozenset(t[0] for t in stats[: j + 1])
        return float(risk[j]), Split(name, left_levels=left)

    # -- pruning -----------------------------------------------------------

    def prune_path(self, root: dict):
        """Weakest-link collapse sequence: [(alpha, collapsed_id_set), ...]."""
        snapshots = [(0.0, frozenset())]
        collapsed: set = set()
        while True:
            info = {}

            def visit(nd):
                if "split" not in nd or nd["id"] in collapsed:
                    return nd["risk"], 1
                rl, ll = visit(nd["left"])
                rr, lr = visit(nd["right"])
                info[nd["id"]] = (nd["risk"], rl + rr, ll + lr)
                return rl + rr, ll + lr

            _, n_leaves = visit(root)
            if n_leaves == 1:
                break
            g = {
                i: (risk - r_sub) / (leaves - 1)
                for i, (risk, r_sub, leaves) in info.items()
            }
            alpha = min(g.values())
            collapsed |= {i for i, gi in g.items() if gi <= alpha + 1e-15 * (1 + abs(alpha))}
            snapshots.append((max(alpha, snapshots[-1][0]), frozenset(collapsed)))
        return snapshots

    def predict(self, root: dict, collapsed: frozenset, idx) -> np.ndarray:
        values = {f[0]: f[2] for f in self.features}
        out = np.empty(idx.size, dtype=float)

        def fill(nd, rows, pos):
            if "split" not in nd or nd["id"] in collapsed:
                out[pos] = nd["estimate"]
                return
            split = nd["split"]
            x = values[split.covariate][rows]
            if split.threshold is not None:
                mask = x.astype(float) <= split.threshold
            else:
                mask = np.isin(x, sorted(split.left_levels))
            fill(nd["left"], rows[mask], pos[mask])
            fill(nd["right"], rows[~mask], pos[~mask])

        fill(root, np.asarray(idx, dtype=int), np.arange(idx.size))
        return out


def _select_snapshot(snapshots, alpha):
    chosen = snapshots[0]
    for snap in snapshots:
        if snap[0] <= alpha:
            chosen = snap
    return chosen


def _to_effect_tree(root: dict, collapsed: frozenset) -> EffectTree:
    def emit(nd):
        spec = {"n_pairs": nd["n_pairs"], "estimate": nd["estimate"]}
        if "split" in nd and nd["id"] not in collapsed:
            spec["split"] = nd["split"]
            spec["left"] = emit(nd["left"])
            spec["right"] = emit(nd["right"])
        return spec

    return tree_from_nested(emit(root))


# CART keeps a finer tree only when it beats the current candidate in at
# least _CART_VOTE_M of the cv_folds folds, each win by more than
# _CART_VOTE_MARGIN of that fold's root-model risk. Fold-majority selection
# has a flatter operating curve than mean-risk thresholds, which is what
# keeps weak-signal trees rare without also vetoing strong ones.
_CART_VOTE_M = 8
_CART_VOTE_MARGIN = 0.0075
_CART_VOTE_VARIANT = "walk"
_CART_SE_FACTOR = 1.0

# CT slack, in standard errors of the cross-validated risk difference
# against the minimizer (paired across folds). 0 takes the plain minimizer.
_CT_SE_FACTOR = 0.0


def _cv_alpha(grower: _Grower, config: GrowthConfig, snapshots) -> float:
    """Pick the pruning penalty by K-fold cross-validation.

    Both methods cross-validate the pruning penalty on re-grown per-fold
    trees. CART walks from the coarsest candidate toward finer ones,
    accepting a refinement only on a fold-majority vote with a relative
    margin. CT takes the largest penalty whose risk sits within
    ``_CT_SE_FACTOR`` paired standard errors of the minimum (0: the plain
    minimizer). Folds are assigned round-robin over id-sorted pairs, so the
    choice does not depend on row order.
    """
    if config.complexity_grid:
        reps = list(config.complexity_grid)
    else:
        alphas = [a for a, _ in snapshots[1:]]
        if not alphas:
            return 0.0
        reps = [0.0]
        reps += [math.sqrt(a * b) for a, b in zip(alphas[:-1], alphas[1:])]
        reps.append(alphas[-1] * 4.0)
    folds = grower.id_rank % config.cv_folds
    fold_risks = np.zeros((config.cv_folds, len(reps)))
    for k in range(config.cv_folds):
        train = np.flatnonzero(folds != k)
        val = np.flatnonzero(folds == k)
        val = val[np.argsort(grower.id_rank[val])]
        if train.size < 2 or val.size == 0:
            continue
        root_k = grower.grow(train)
        path_k = grower.prune_path(root_k)
        y_val = grower.y[val]
        for j, alpha in enumerate(reps):
            _, collapsed = _select_snapshot(path_k, alpha)
            pred = grower.predict(root_k, collapsed, val)
            fold_risks[k, j] = float(((y_val - pred) ** 2).sum())
    if config.method == "CART" and _CART_VOTE_VARIANT != "se":
        margin = _CART_VOTE_MARGIN * fold_risks[:, -1]
        need = min(_CART_VOTE_M, config.cv_folds)
        j_star = len(reps) - 1
        if _CART_VOTE_VARIANT == "root":
            for j in range(len(reps) - 1):
                wins = int(np.sum(fold_risks[:, -1] - fold_risks[:, j] > margin))
                if wins >= need:
                    j_star = j
                    break
            return reps[j_star]
        for j in range(len(reps) - 2, -1, -1):
            wins = int(np.sum(fold_risks[:, j_star] - fold_risks[:, j] > margin))
            if wins >= need:
                j_star = j
        return reps[j_star]
    factor = _CART_SE_FACTOR if config.method == "CART" else _CT_SE_FACTOR
    cv = fold_risks.sum(axis=0)
    j_min = int(np.argmin(cv))
    paired = fold_risks - fold_risks[:, [j_min]]
    se = np.std(paired, axis=0, ddof=1) * math.sqrt(config.cv_folds)
    slack = factor * se + 1e-12 * (1.0 + abs(cv[j_min]))
    j_star = max(j for j in range(len(reps)) if cv[j] <= cv[j_min] + slack[j])
    return reps[j_star]


def _grow_with(pairs: MatchedPairSet, config: GrowthConfig, crit) -> EffectTree:
    if pairs.n_pairs < 1:
        raise DataError("discovery sample is empty")
    grower = _Grower(pairs, config, crit)
    if np.ptp(grower.y) == 0.0:
        warnings.warn(
            "responses are identical; no structure to discover",
            DiscoveryWarning,
            stacklevel=3,
        )
        root = grower.grow(np.arange(pairs.n_pairs))
        return _to_effect_tree(root, frozenset({root["id"]}))
    root = grower.grow(np.arange(pairs.n_pairs))
    if "split" not in root:
        return _to_effect_tree(root, frozenset())
    snapshots = grower.prune_path(root)
    alpha = _cv_alpha(grower, config, snapshots)
    _, collapsed = _select_snapshot(snapshots, alpha)
    return _to_effect_tree(root, collapsed)


def grow_cart(discovery: MatchedPairSet, config: GrowthConfig) -> EffectTree:
    """Least-squares regression tree on pair differences, CV-pruned."""
    config = replace(config, method="CART")
    return _grow_with(discovery, config, _CartRisk())


def grow_ct(discovery: MatchedPairSet, config: GrowthConfig) -> EffectTree:
    """Honest-criterion tree; the planned confirmation size tempers growth."""
    config = replace(config, method="CT")
    crit = _HonestRisk(discovery.n_pairs, config.honest_fraction_hint)
    return _grow_with(discovery, config, crit)


def grow(discovery: MatchedPairSet, config: GrowthConfig) -> EffectTree:
    """Dispatch on ``config.method``."""
    if config.method == "CT":
        return grow_ct(discovery, config)
    return grow_cart(discovery, config)
