"""Synthetic matched-pair designs and replicated operating characteristics.

Each design draws pair-shared fair-coin covariates x1..xk and gives the pair
an effect set by the (x1, x2) cell. Continuous outcomes give each unit its
own standard normal outcome, centered at the cell effect for the treated
unit, so the pair difference has mean exactly the cell effect and variance 2
(matched units share covariates, not noise). Binary outcomes draw each
unit's potential pair: with
probability delta the unit is a responder (control potential 0, treated
potential 1); otherwise both potentials equal a fair coin.

Replication r of a scenario is fully determined by (scenario.seed, r), so
tables are reproducible and replications can run in any order or in
parallel.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .binary import binary_joint_test
from .discovery import GrowthConfig, apply_split, grow, split_sample
from .errors import (
    BracketClampWarning,
    ConfigError,
    DiscoveryWarning,
    EmptyLeafWarning,
)
from .jointtest import ci_method_test
from .model import MatchedPairSet, assign_pairs, build_conversion_matrix

_SITUATIONS = {
    "continuous": {
        1: (0.4, 0.4, 0.6, 0.6),
        2: (0.3, 0.3, 0.7, 0.7),
        3: (0.4, 0.4, 0.5, 0.7),
        4: (0.3, 0.3, 0.6, 0.8),
        5: (0.2, 0.5, 0.5, 0.8),
    },
    "binary": {
        1: (0.45, 0.45, 0.55, 0.55),
        2: (0.4, 0.4, 0.6, 0.6),
        3: (0.45, 0.45, 0.5, 0.6),
        4: (0.4, 0.4, 0.5, 0.7),
        5: (0.35, 0.5, 0.5, 0.65),
    },
}

_SPLIT_TAG = 0x53504C


@dataclass(frozen=True)
class Scenario:
    """One synthetic design: outcome kind, effect cell values, and sizes.

    ``effects`` is indexed by the (x1, x2) cell as (e00, e01, e10, e11);
    covariates beyond x1 and x2 never influence the outcome.
    """

    kind: str
    effects: tuple
    n_pairs: int = 2000
    n_covariates: int = 5
    reps: int = 1000
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("continuous", "binary"):
            raise ConfigError(f"unknown outcome kind {self.kind!r}")
        effects = tuple(float(e) for e in self.effects)
        object.__setattr__(self, "effects", effects)
        if len(effects) != 4:
            raise ConfigError("effects must have entries for the four (x1,x2) cells")
        if not all(np.isfinite(effects)):
            raise ConfigError("effects must be finite")
        if self.kind == "binary" and not all(0.0 <= e <= 1.0 for e in effects):
            raise ConfigError("binary effects are probabilities in [0,1]")
        if self.n_covariates < 2:
            raise ConfigError("need at least x1 and x2")
        if self.n_pairs < 2:
            raise ConfigError("need at least 2 pairs")
        if self.reps < 1:
            raise ConfigError("reps must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")


def situation(kind: str, number: int, **overrides) -> Scenario:
    """The five canonical designs per outcome kind, by their table number."""
    table = _SITUATIONS.get(kind)
    if table is None:
        raise ConfigError(f"unknown outcome kind {kind!r}")
    if number not in table:
        raise ConfigError(f"no situation {number}; choose from {sorted(table)}")
    overrides.setdefault("name", f"s{number}-{kind}")
    return Scenario(kind=kind, effects=table[number], **overrides)


def scenario_from_file(path) -> Scenario:
    """Read a Scenario from a JSON or TOML file."""
    text_path = str(path)
    if text_path.endswith(".toml"):
        data = _read_toml(path)
    else:
        data = _read_json(path)
    known = {f.name for f in fields(Scenario)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    if "effects" in data:
        data["effects"] = tuple(data["effects"])
    return Scenario(**data)


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: scenario must be a table of keys")
    return data


def _read_toml(path) -> dict:
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: not valid TOML: {exc}") from exc


def generate(scenario: Scenario, rep_index: int) -> MatchedPairSet:
    """Draw one replication; deterministic in (scenario.seed, rep_index)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([scenario.seed, int(rep_index)])
    )
    n = scenario.n_pairs
    covs = {
        f"x{i + 1}": rng.integers(0, 2, size=n).astype(float)
        for i in range(scenario.n_covariates)
    }
    cell = (2 * covs["x1"] + covs["x2"]).astype(int)
    effect = np.asarray(scenario.effects)[cell]
    if scenario.kind == "continuous":
        control = rng.normal(size=n)
        treated = rng.normal(loc=effect, scale=1.0)
    else:
        responder_t = rng.random(n) < effect
        base_t = rng.integers(0, 2, size=n).astype(float)
        treated = np.where(responder_t, 1.0, base_t)
        responder_c = rng.random(n) < effect
        base_c = rng.integers(0, 2, size=n).astype(float)
        control = np.where(responder_c, 0.0, base_c)
    pair_ids = np.array([f"p{i:07d}" for i in range(n)], dtype=object)
    return MatchedPairSet(
        outcome_t=treated,
        outcome_c=control,
        cols_t=covs,
        cols_c={k: v.copy() for k, v in covs.items()},
        pair_ids=pair_ids,
        kinds={k: "binary" for k in covs},
    )


def _split_seed(scenario: Scenario, rep_index: int) -> int:
    ss = np.random.SeedSequence([scenario.seed, int(rep_index), _SPLIT_TAG])
    return int(ss.generate_state(1)[0])


def _validate_ratio(split_ratio):
    ratio = tuple(float(r) for r in split_ratio)
    if len(ratio) != 2 or not all(0 < r < 1 for r in ratio):
        raise ConfigError(f"split ratio must be two fractions in (0,1), got {ratio}")
    return ratio


def _discover(scenario, rep_index, split_ratio, method):
    pairs = generate(scenario, rep_index)
    plan = split_sample(pairs, split_ratio, seed=_split_seed(scenario, rep_index))
    disc, conf = apply_split(pairs, plan)
    config = GrowthConfig(method=method, honest_fraction_hint=split_ratio[1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DiscoveryWarning)
        tree = grow(disc, config)
    return tree, conf


def _map_reps(fn, reps: int, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(reps)))
    return [fn(r) for r in range(reps)]


def run_power(
    scenario: Scenario,
    split_ratio,
    method: str,
    gamma_ci: float = 0.01,
    alpha: float = 0.04,
    *,
    reps: int | None = None,
    threads: int = 1,
) -> dict:
    """Fraction of replications in which the whole pipeline rejects.

    Each replication regrows a tree on its discovery half and runs the joint
    confirmation test on the other half; a replication whose tree has no
    split cannot reject. Returns the rejection fraction and its Monte Carlo
    standard error.
    """
    ratio = _validate_ratio(split_ratio)
    n_reps = scenario.reps if reps is None else int(reps)

    def one(rep: int) -> bool:
        tree, conf = _discover(scenario, rep, ratio, method)
        if tree.n_leaves < 2:
            return False
        conv = build_conversion_matrix(tree)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyLeafWarning)
            warnings.simplefilter("ignore", BracketClampWarning)
            grouped = assign_pairs(conf, tree)
            if scenario.kind == "binary":
                res = binary_joint_test(
                    grouped, conv, gamma=1.0, alpha=alpha, gamma_ci=gamma_ci
                )
            else:
                res = ci_method_test(
                    grouped, conv, gamma=1.0, alpha=alpha, gamma_ci=gamma_ci
                )
        return bool(res.reject)

    rejections = _map_reps(one, n_reps, threads)
    power = float(np.mean(rejections))
    return {
        "power": power,
        "mc_se": float(math.sqrt(power * (1.0 - power) / n_reps)),
        "reps": n_reps,
        "rejections": int(np.sum(rejections)),
    }


def run_discovery_rates(
    scenario: Scenario,
    split_ratio,
    method: str,
    *,
    reps: int | None = None,
    threads: int = 1,
) -> dict:
    """Per-covariate fraction of replications whose tree splits on it."""
    ratio = _validate_ratio(split_ratio)
    n_reps = scenario.reps if reps is None else int(reps)
    names = [f"x{i + 1}" for i in range(scenario.n_covariates)]

    def one(rep: int) -> tuple:
        tree, _ = _discover(scenario, rep, ratio, method)
        return tree.split_covariates

    hits = _map_reps(one, n_reps, threads)
    return {
        name: float(np.mean([name in used for used in hits])) for name in names
    }


def write_rows(path, rows, columns=None) -> None:
    """Write dict rows as CSV with a stable column order and byte layout."""
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(columns))
        for row in rows:
            writer.writerow([row.get(c, "") for c in columns])
