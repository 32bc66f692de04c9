"""Worst-case randomization tests for binary matched-pair outcomes.

With 0/1 responses the unit-level effect takes values in {-1, 0, 1} and the
average effect over N units is only testable on the compatible grid d/N. The
machinery here evaluates group statistics T_g against every counterfactual
completion of the observed table: each pair leaves two potential outcomes
unobserved, and each completion fixes the pair's contribution to the total
effect, to the assignment-randomization variance, and to the bias range of
the statistic's mean under the sensitivity model. Maximizing variance and
mean range subject to a fixed total effect is an integer program that is
separable along the total-effect axis, which the functions below solve
exactly through closed-form per-class value tables.

The module also carries the screening toolkit used alongside the joint
tests: McNemar upper-bound P-values, truncated-product combination, and the
amplification map between the single sensitivity parameter and the
(treatment, outcome) confounder-association pair.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import binom

from .errors import BracketClampWarning, ConfigError, DataError
from .jointtest import (
    _SIGMA_TOL,
    _check_gamma,
    _clamped_deviates,
    _group_arrays,
    CiTestResult,
    mvn_equicoordinate_quantile,
)
from .model import ConversionMatrix, MatchedPairSet

_SNAP = 1e-9
_OFFSETS = np.arange(-3, 4)


def _binary_diffs(pairs: MatchedPairSet) -> np.ndarray:
    yt = pairs.outcome_treated
    yc = pairs.outcome_control
    if yt.size == 0:
        raise DataError("no pairs")
    if not (np.all(np.isin(yt, (0.0, 1.0))) and np.all(np.isin(yc, (0.0, 1.0)))):
        raise DataError("binary analysis requires 0/1 outcomes")
    return (yt - yc).astype(np.int64)


@dataclass(frozen=True)
class BinaryEstimate:
    """Average unit-level effect estimate with per-leaf breakdown."""

    delta_hat: float
    per_group: tuple


def binary_estimate(pairs: MatchedPairSet) -> BinaryEstimate:
    """Unbiased estimate of the average effect: the mean pair difference."""
    d = _binary_diffs(pairs)
    per_group = []
    if pairs.groups is not None:
        for g in sorted({int(v) for v in pairs.groups}):
            sel = pairs.groups == g
            per_group.append((g, int(2 * sel.sum()), float(d[sel].mean())))
    return BinaryEstimate(delta_hat=float(d.mean()), per_group=tuple(per_group))


def compatible_bracket(delta0: float, n_units: int) -> tuple:
    """Nearest effect values weakly below/above delta0 expressible as d/n."""
    n = int(n_units)
    if n <= 0:
        raise ConfigError("group size must be positive")
    if not -1.0 - 1e-12 <= delta0 <= 1.0 + 1e-12:
        raise ConfigError(f"delta0 must lie in [-1, 1], got {delta0}")
    x = float(delta0) * n
    r = round(x)
    if abs(x - r) < _SNAP:
        lo = hi = int(r)
    else:
        lo, hi = int(np.floor(x)), int(np.ceil(x))
    return (lo / n, hi / n)


def _class_counts_from_obs(diffs) -> tuple:
    d = np.asarray(diffs)
    return (int(np.sum(d > 0)), int(np.sum(d == 0)), int(np.sum(d < 0)))


def _pm_value(m, t, kind):
    # class of pairs whose observed difference is +1 (mirrored for -1):
    # completions contribute (effect, variance, range) in
    # {(1,1,1), (2,0,0), (0,4,2)}, scaled by the class count
    t = np.abs(t)
    if kind == "variance":
        val = 4 * m - 3 * t + 2 * (t // 2)
    else:
        val = 2 * m - t
    return np.where(t > 2 * m, -np.inf, val)


def _zero_value(m, t):
    # concordant pairs: completions contribute (0,0,0), (1,1,1) or (-1,1,1)
    t = np.abs(t)
    return np.where(t > m, -np.inf, m - ((m - t) % 2))


def _combined_value(counts, targets, kind) -> np.ndarray:
    """Exact maximum of the summed class value tables at each target total.

    The per-class tables are linear up to a parity correction, so the joint
    maximizer lies within a bounded window of the greedy allocation; a small
    candidate grid around the three anchors is exact (verified against full
    enumeration).
    """
    mp, mz, mm = counts
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    zeros = np.zeros_like(t)
    cand_p = np.stack([zeros, t - mz, t], axis=-1)[..., None] + _OFFSETS
    cand_p = np.clip(cand_p.reshape(t.shape + (-1,)), 0, 2 * mp)
    cand_m = np.stack([zeros, t + mz, t], axis=-1)[..., None] + _OFFSETS
    cand_m = np.clip(cand_m.reshape(t.shape + (-1,)), -2 * mm, 0)
    tp = cand_p[..., :, None]
    tm = cand_m[..., None, :]
    tz = t[..., None, None] - tp - tm
    val = _pm_value(mp, tp, kind) + _pm_value(mm, tm, kind) + _zero_value(mz, tz)
    return val.max(axis=(-1, -2))


def _hull(counts) -> tuple:
    mp, mz, mm = counts
    return (-(2 * mm + mz), 2 * mp + mz)


def _target_total(delta_target: float, n_units: int) -> int:
    x = float(delta_target) * n_units
    r = round(x)
    if abs(x - r) > _SNAP:
        raise DataError(
            f"effect {delta_target!r} is not compatible with {n_units} units"
        )
    return int(r)


def worst_case_variance(
    pairs: MatchedPairSet, delta_target: float, gamma: float = 1.0
) -> float:
    """Maximal variance of the group statistic over completions with the
    given total effect. The variance-maximizing assignment probability is
    1/2, which every sensitivity interval contains, so the result does not
    depend on gamma."""
    _check_gamma(gamma)
    counts = _class_counts_from_obs(_binary_diffs(pairs))
    t = _target_total(delta_target, 2 * pairs.n_pairs)
    lo, hi = _hull(counts)
    if not lo <= t <= hi:
        raise DataError(
            f"incompatible null: no completion of the observed table attains "
            f"total effect {t}"
        )
    return float(_combined_value(counts, t, "variance")[0])


def worst_case_mean_shift(
    pairs: MatchedPairSet, delta_target: float, gamma: float = 1.0
) -> float:
    """Worst-case displacement of the group statistic's mean under the
    sensitivity model, maximized over completions with the given total."""
    _check_gamma(gamma)
    counts = _class_counts_from_obs(_binary_diffs(pairs))
    t = _target_total(delta_target, 2 * pairs.n_pairs)
    lo, hi = _hull(counts)
    if not lo <= t <= hi:
        raise DataError(
            f"incompatible null: no completion of the observed table attains "
            f"total effect {t}"
        )
    factor = (gamma - 1.0) / (gamma + 1.0)
    return float(factor * _combined_value(counts, t, "shift")[0])


def mcnemar_upper_p(pairs: MatchedPairSet, gamma: float = 1.0) -> float:
    """Upper bound on the one-sided McNemar P-value at sensitivity gamma.

    Exact binomial tail up to 1000 discordant pairs, then a continuity
    corrected normal tail (error below 1e-3 in that regime).
    """
    _check_gamma(gamma)
    d = _binary_diffs(pairs)
    disc = int(np.sum(d != 0))
    t_plus = int(np.sum(d > 0))
    if disc == 0:
        warnings.warn("no discordant pairs; P-value is 1", stacklevel=2)
        return 1.0
    pbar = gamma / (1.0 + gamma)
    if disc <= 1000:
        return float(binom.sf(t_plus - 1, disc, pbar))
    mu = disc * pbar
    sd = np.sqrt(disc * pbar * (1.0 - pbar))
    return float(ndtr((mu - t_plus + 0.5) / sd))


def truncated_product(
    pvalues: Sequence[float],
    truncation: float = 0.2,
    mc_reps: int = 100_000,
    *,
    seed: int = 0,
) -> float:
    """Combine P-values through the product of those below the truncation
    point, calibrated by Monte Carlo under joint uniformity."""
    ps = np.asarray(list(pvalues), dtype=float)
    if ps.size == 0:
        raise ConfigError("need at least one P-value")
    if not np.all(np.isfinite(ps)) or np.any((ps < 0.0) | (ps > 1.0)):
        raise ConfigError("P-values must lie in [0, 1]")
    if not 0.0 < truncation <= 1.0:
        raise ConfigError(f"truncation must lie in (0, 1], got {truncation}")
    used = ps[ps <= truncation]
    if used.size == 0:
        return 1.0
    logw = float(np.log(np.clip(used, 1e-300, None)).sum())
    rng = np.random.default_rng(np.random.SeedSequence((0x5452_5550, int(seed))))
    reps = int(mc_reps)
    k = ps.size
    count = 0
    done = 0
    batch = max(1, min(reps, int(2e7) // k))
    while done < reps:
        b = min(batch, reps - done)
        u = np.clip(rng.random((b, k)), 1e-300, None)
        lw = np.where(u <= truncation, np.log(u), 0.0).sum(axis=1)
        count += int(np.sum(lw <= logw))
        done += b
    return float((count + 1) / (reps + 1))


def amplify_point(lam: float, delta: float) -> float:
    """Sensitivity parameter matching a (treatment, outcome) association
    pair: gamma = (delta*lam + 1) / (delta + lam)."""
    if not (np.isfinite(lam) and np.isfinite(delta)) or lam < 1.0 or delta < 1.0:
        raise ConfigError("amplification components must be >= 1")
    return float((delta * lam + 1.0) / (delta + lam))


def amplify(gamma: float, deltas: Sequence[float] | None = None) -> tuple:
    """Amplification curve: (lam, delta) pairs equivalent to gamma."""
    if not np.isfinite(gamma) or gamma < 1.0:
        raise ConfigError(f"gamma must be >= 1, got {gamma}")
    if deltas is None:
        deltas = np.linspace(gamma + 0.05, max(3.0 * gamma, gamma + 2.0), 41)
    out = []
    for dl in np.asarray(deltas, dtype=float):
        if dl <= gamma:
            raise ConfigError("delta grid values must exceed gamma")
        lam = (gamma * dl - 1.0) / (dl - gamma)
        out.append((float(lam), float(dl)))
    return tuple(out)


class _GroupTables:
    """Per-leaf completion tables and bracket evaluation over a grid of
    pooled-axis totals."""

    def __init__(self, counts, t_stats, n_units, n_total, gamma):
        self.counts = counts
        self.t_stats = np.asarray(t_stats, dtype=np.int64)
        self.n_units = np.asarray(n_units, dtype=np.int64)
        self.n_total = int(n_total)
        self.factor = (gamma - 1.0) / (gamma + 1.0)
        self.hulls = [_hull(c) for c in counts]
        self.clamped_any = False

    def _side(self, g, t_side):
        lo, hi = self.hulls[g]
        clipped = np.clip(t_side, lo, hi)
        if np.any(clipped != t_side):
            self.clamped_any = True
        var = _combined_value(self.counts[g], clipped, "variance")
        shift = self.factor * _combined_value(self.counts[g], clipped, "shift")
        return clipped, var, shift

    def choose(self, d_grid):
        """Bracket each group at every pooled total and keep the side whose
        leaf deviate is less extreme. Returns (center, var, shift) arrays of
        shape (G, len(d_grid))."""
        d_grid = np.asarray(d_grid, dtype=np.int64)
        n_groups = len(self.counts)
        t_out = np.empty((n_groups, d_grid.size))
        v_out = np.empty((n_groups, d_grid.size))
        s_out = np.empty((n_groups, d_grid.size))
        for g in range(n_groups):
            prod = d_grid * self.n_units[g]
            t_lo = prod // self.n_total
            t_hi = -((-prod) // self.n_total)
            best_dev = None
            for t_side in (t_lo, t_hi):
                t_c, var, shift = self._side(g, t_side)
                dev = _leaf_deviate(self.t_stats[g], t_c, var, shift)
                if best_dev is None:
                    t_out[g], v_out[g], s_out[g] = t_c, var, shift
                    best_dev = dev
                else:
                    take = np.abs(dev) < np.abs(best_dev)
                    t_out[g] = np.where(take, t_c, t_out[g])
                    v_out[g] = np.where(take, var, v_out[g])
                    s_out[g] = np.where(take, shift, s_out[g])
        return t_out, v_out, s_out


def _leaf_deviate(t_stat, center, var, shift):
    sigma = np.sqrt(np.maximum(var, 0.0))
    _, _, dev = _clamped_deviates(
        float(t_stat), center + shift, center - shift, sigma
    )
    return np.where(sigma > _SIGMA_TOL, dev, 0.0)


def binary_joint_test(
    pairs: MatchedPairSet,
    conv: ConversionMatrix,
    gamma: float = 1.0,
    alpha: float = 0.04,
    gamma_ci: float = 0.01,
    *,
    seed: int = 0,
    scan_pad: float = 2.0,
) -> CiTestResult:
    """Joint worst-case test of a common average effect for binary outcomes.

    Scans the compatible effect grid inside a (1 - gamma_ci) pooled
    confidence interval (or an expanding scan when gamma_ci is 0), brackets
    each leaf at the two nearest group-compatible values keeping the less
    extreme deviate, and compares the least favorable maximum node deviate
    with the equicoordinate critical value. Total level alpha + gamma_ci.
    """
    _check_gamma(gamma)
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if not 0.0 <= gamma_ci < 1.0:
        raise ConfigError(f"gamma_ci must lie in [0, 1), got {gamma_ci}")
    if alpha + gamma_ci >= 1.0:
        raise ConfigError("alpha + gamma_ci must be below 1")

    _, gidx = _group_arrays(pairs, conv)
    d = _binary_diffs(pairs)
    n_groups = conv.n_leaves
    counts = []
    t_stats = np.zeros(n_groups, dtype=np.int64)
    n_units = np.zeros(n_groups, dtype=np.int64)
    for g in range(n_groups):
        sel = gidx == g
        counts.append(_class_counts_from_obs(d[sel]))
        t_stats[g] = 2 * int(d[sel].sum())
        n_units[g] = 2 * int(sel.sum())
    n_total = int(n_units.sum())
    t_pool = int(t_stats.sum())
    pooled_counts = tuple(int(sum(c[j] for c in counts)) for j in range(3))
    factor = (gamma - 1.0) / (gamma + 1.0)
    tables = _GroupTables(counts, t_stats, n_units, n_total, gamma)
    c_mat = conv.matrix.astype(float)
    s_nodes = c_mat @ t_stats.astype(float)

    def node_devs(d_grid):
        centers, variances, shifts = tables.choose(d_grid)
        center_n = c_mat @ centers
        sigma_n = np.sqrt(np.maximum(c_mat @ variances, 0.0))
        shift_n = c_mat @ shifts
        _, _, dev = _clamped_deviates(
            s_nodes[:, None], center_n + shift_n, center_n - shift_n, sigma_n
        )
        return np.where(sigma_n > _SIGMA_TOL, dev, 0.0), sigma_n

    # critical value from the correlation structure at the central total
    dev0, sigma0 = node_devs(np.array([t_pool]))
    keep = sigma0[:, 0] > _SIGMA_TOL
    excluded = tuple(
        nid for nid, ok in zip(conv.row_node_ids, keep) if not ok
    )
    if not np.any(keep):
        raise DataError("every comparison node is degenerate")
    _, var0, _ = tables.choose(np.array([t_pool]))
    ck = c_mat[keep]
    cov = (ck * var0[:, 0]) @ ck.T
    sig = np.sqrt(np.diag(cov))
    rho = cov / np.outer(sig, sig)
    np.fill_diagonal(rho, 1.0)
    kappa = mvn_equicoordinate_quantile(rho, 1.0 - alpha, seed=seed)

    hull_lo, hull_hi = _hull(pooled_counts)
    ci = None
    if gamma_ci > 0.0:
        z = float(ndtri(1.0 - gamma_ci / 2.0))

        def pool_dev(d_vals):
            var = _combined_value(pooled_counts, d_vals, "variance")
            shift = factor * _combined_value(pooled_counts, d_vals, "shift")
            sigma = np.sqrt(np.maximum(var, 0.0))
            _, _, dev = _clamped_deviates(
                float(t_pool), d_vals + shift, d_vals - shift, sigma
            )
            small = np.abs(t_pool - d_vals) <= _SIGMA_TOL
            return np.where(
                sigma > _SIGMA_TOL, dev, np.where(small, 0.0, np.inf)
            )

        d_lo = _walk_until(pool_dev, t_pool, -1, hull_lo, z)
        d_hi = _walk_until(pool_dev, t_pool, +1, hull_hi, z)
        ci = (d_lo / n_total, d_hi / n_total)
        grid = np.arange(d_lo, d_hi + 1, dtype=np.int64)
        d_max, _ = _grid_max(node_devs, grid)
    else:
        def scan_max(d_vals):
            dev, _ = node_devs(d_vals)
            return np.abs(dev).max(axis=0)

        d_lo = _walk_until(scan_max, t_pool, -1, hull_lo, kappa + scan_pad)
        d_hi = _walk_until(scan_max, t_pool, +1, hull_hi, kappa + scan_pad)
        grid = np.arange(d_lo, d_hi + 1, dtype=np.int64)
        d_max, _ = _grid_max(node_devs, grid)

    if tables.clamped_any:
        warnings.warn(
            "some groups cannot express every scanned effect; brackets were "
            "clamped to the group's feasible boundary",
            BracketClampWarning,
            stacklevel=2,
        )

    j = int(np.argmin(d_max))
    d_min = float(d_max[j])
    return CiTestResult(
        reject=bool(d_min > kappa),
        d_min=d_min,
        tau_at_min=float(grid[j] / n_total),
        kappa=float(kappa),
        gamma=float(gamma),
        alpha=float(alpha),
        gamma_ci=float(gamma_ci),
        ci=ci,
        scan_taus=grid.astype(float) / n_total,
        scan_d_max=d_max,
        n_pairs=int(pairs.n_pairs),
        excluded_node_ids=excluded,
    )


def _grid_max(node_devs, grid):
    dev, sigma = node_devs(grid)
    return np.abs(dev).max(axis=0), sigma


def _walk_until(fn, start, step, bound, threshold, chunk=64):
    """March along the integer axis from start until |fn| clears the
    threshold for three consecutive points (guards against parity wiggles)
    or the feasible bound is reached. Returns the last point kept."""
    last = start
    pos = start
    run = 0
    while (pos - bound) * step < 0:
        stop = pos + step * chunk
        if (stop - bound) * step > 0:
            stop = bound
        vals = np.arange(pos + step, stop + step, step, dtype=np.int64)
        if vals.size == 0:
            break
        out = np.abs(fn(vals))
        for v, o in zip(vals, out):
            if o > threshold:
                run += 1
                if run >= 3:
                    return int(last)
            else:
                run = 0
                last = v
        pos = int(vals[-1])
    return int(last)
