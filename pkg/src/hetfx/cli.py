"""Command line pipeline around the library.

Nine subcommands cover the full workflow: ``match`` pairs a raw cohort,
``balance`` tabulates covariate balance, ``split`` partitions the pairs into
discovery and confirmation halves, ``discover`` grows an effect tree on the
discovery half, ``test``/``subgroup``/``sensitivity`` run the confirmation
machinery on the held-out half, ``simulate`` reproduces the power and
discovery-rate tables, and ``report`` renders the annotated tree.

Every subcommand writes its artifacts into ``--out-dir`` together with a
``<subcommand>_manifest.json`` recording input hashes, a digest of the
effective configuration, the seed, package versions and the wall clock.
Artifacts are deterministic: rerunning with the same inputs reproduces them
byte for byte (only the manifest's wall clock field varies). Errors are
reported as a single JSON object on stderr and a matching exit code:
2 for configuration problems, 3 for data problems, 4 for numeric failures.

The seed recorded in the manifest is the root of all randomness in the run;
the ``HETFX_SEED`` environment variable overrides ``--seed`` when set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .binary import amplify, binary_joint_test, mcnemar_upper_p, truncated_product
from .discovery import (
    GrowthConfig,
    apply_split,
    grow,
    growth_config_from_file,
    plan_from_json,
    plan_to_json,
    split_sample,
)
from .errors import ConfigError, DataError, HetfxError
from .ingest import balance, greedy_match_report, load_cohort, load_pairs, save_pairs
from .jointtest import (
    ci_method_test,
    joint_deviates,
    node_deviate_scan,
    sensitivity_sweep,
    subgroup_test,
)
from .model import EffectTree, assign_pairs, build_conversion_matrix
from .simlab import run_discovery_rates, run_power, scenario_from_file, situation, write_rows


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Run:
    """One subcommand invocation: tracks inputs and outputs for the manifest.

    ``config`` must hold only logical settings (no filesystem paths), so the
    configuration digest is stable when the same run is repeated elsewhere.
    """

    def __init__(self, subcommand: str, out_dir, seed, config: dict):
        self.subcommand = subcommand
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.config = config
        self.inputs: dict = {}
        self.outputs: list = []
        self.t0 = time.time()

    def add_input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"input file not found: {p}")
        self.inputs[str(p)] = _sha256_file(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.out_dir / name
        p.write_text(text)
        self.outputs.append(p)
        print(f"wrote {p}")
        return p

    def write_json(self, name: str, doc) -> Path:
        return self.write_text(name, json.dumps(doc, sort_keys=True, indent=2) + "\n")

    def write_csv(self, name: str, rows, columns=None) -> Path:
        p = self.out_dir / name
        write_rows(p, rows, columns)
        self.outputs.append(p)
        print(f"wrote {p}")
        return p

    def emit(self, path) -> None:
        # register an artifact written by library code
        self.outputs.append(Path(path))
        print(f"wrote {path}")

    def finish(self) -> int:
        digest = hashlib.sha256(
            json.dumps(self.config, sort_keys=True).encode()
        ).hexdigest()
        manifest = {
            "subcommand": self.subcommand,
            "seed": self.seed,
            "config": self.config,
            "config_digest": digest,
            "inputs": self.inputs,
            "outputs": {str(p): _sha256_file(p) for p in self.outputs},
            "versions": {
                "hetfx": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "wall_clock_seconds": float(time.time() - self.t0),
        }
        path = self.out_dir / f"{self.subcommand}_manifest.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        return 0


# --------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _resolve_seed(args, default=0):
    env = os.environ.get("HETFX_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"HETFX_SEED must be an integer, got {env!r}")
    seed = getattr(args, "seed", None)
    return default if seed is None else int(seed)


def _parse_ratio(text: str) -> tuple:
    try:
        vals = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse ratio {text!r}")
    if len(vals) == 1:
        vals = [vals[0], 1.0 - vals[0]]
    if len(vals) != 2:
        raise ConfigError("ratio takes one or two comma separated fractions")
    return tuple(vals)


def _parse_grid(text: str) -> list:
    """Either ``start:stop:step`` with inclusive endpoints or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid syntax is start:stop:step, got {text!r}")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"cannot parse grid {text!r}")
        if step <= 0.0 or stop < start:
            raise ConfigError("grid needs stop >= start and step > 0")
        n = int(round((stop - start) / step))
        vals = [start + k * step for k in range(n + 1)]
        if vals[-1] < stop - 1e-9 * max(1.0, abs(stop)):
            vals.append(stop)
        return [round(v, 12) for v in vals]
    try:
        vals = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}")
    if not vals:
        raise ConfigError("empty grid")
    return vals


def _parse_names(text: str) -> tuple:
    return tuple(p.strip() for p in text.split(",") if p.strip()) if text else ()


def _add_cohort_flags(p, with_pairs: bool):
    p.add_argument("--input", required=True, help="cohort CSV (one row per unit)")
    if with_pairs:
        p.add_argument("--pairs", required=True, help="pair membership CSV")
    p.add_argument("--delimiter", default=",", help="cohort file delimiter")
    p.add_argument("--id-col", default="id")
    p.add_argument("--treated-col", default="z")
    p.add_argument("--outcome-col", default="y")


def _add_out_dir(p):
    p.add_argument("--out-dir", required=True, help="artifact directory")


def _load_cohort(args, run: _Run):
    return load_cohort(
        run.add_input(args.input),
        delimiter=args.delimiter,
        id_col=args.id_col,
        treated_col=args.treated_col,
        outcome_col=args.outcome_col,
    )


def _load_cohort_pairs(args, run: _Run):
    cohort = _load_cohort(args, run)
    pairs = load_pairs(run.add_input(args.pairs), cohort, delimiter=args.delimiter)
    return cohort, pairs


def _guarded_subset(args, run: _Run):
    """Apply the honesty guard: inference runs on the confirmation half.

    Returns ``(pairs_for_inference, honesty_tag)``. Without a split plan the
    command refuses to run, because the pair file may contain the pairs the
    tree was grown on; ``--unsafe-full-sample`` overrides explicitly.
    """
    _, pairs = _load_cohort_pairs(args, run)
    unsafe = bool(getattr(args, "unsafe_full_sample", False))
    if args.split is None:
        if not unsafe:
            raise ConfigError(
                "no split plan given, so these pairs may include the discovery "
                "subsample the tree was grown on; pass --split, or "
                "--unsafe-full-sample to test on everything anyway"
            )
        return pairs, "unsafe-full-sample"
    plan = plan_from_json(run.add_input(args.split).read_text())
    _, confirmation = apply_split(pairs, plan)
    if unsafe:
        return pairs, "unsafe-full-sample"
    return confirmation, "confirmation"


def _load_tree(args, run: _Run) -> EffectTree:
    return EffectTree.from_json(run.add_input(args.tree).read_text())


def _outcome_kind(pairs) -> str:
    vals = np.unique(np.concatenate([pairs.outcome_treated, pairs.outcome_control]))
    return "binary" if np.isin(vals, (0.0, 1.0)).all() else "continuous"


def _node_pairs(assigned, tree, node_id):
    mask = np.isin(assigned.groups, tree.descendant_leaves(node_id))
    return assigned.subset(mask)


# --------------------------------------------------------------------------
# subcommands


def cmd_match(args) -> int:
    exact = _parse_names(args.exact_on)
    dist = _parse_names(args.distance_on)
    run = _Run("match", args.out_dir, seed=None, config={
        "exact_on": list(exact), "distance_on": list(dist),
        "caliper": args.caliper,
    })
    cohort = _load_cohort(args, run)
    pairs, report = greedy_match_report(cohort, exact, dist, caliper=args.caliper)
    out = run.out_dir / "pairs.csv"
    save_pairs(pairs, out)
    run.emit(out)
    run.write_json("match.json", {
        "n_pairs": report.n_pairs,
        "n_treated": cohort.n_treated,
        "n_control": cohort.n_control,
        "dropped_caliper": list(report.dropped_caliper),
        "dropped_no_control": list(report.dropped_no_control),
        "empty_strata": [list(s) for s in report.empty_strata],
    })
    print(f"matched {report.n_pairs} of {cohort.n_treated} treated units")
    return run.finish()


def cmd_balance(args) -> int:
    run = _Run("balance", args.out_dir, seed=None, config={})
    cohort, pairs = _load_cohort_pairs(args, run)
    rep = balance(cohort, pairs)
    csv_path = run.out_dir / "balance.csv"
    rep.write_csv(csv_path)
    run.emit(csv_path)
    json_path = run.out_dir / "balance.json"
    rep.write_json(json_path)
    run.emit(json_path)
    flagged = [r.covariate for r in rep.rows if r.degenerate]
    if flagged:
        print(f"degenerate standardization for: {', '.join(flagged)}")
    print(f"balance over {rep.n_pairs} pairs, {len(rep.rows)} covariates")
    return run.finish()


def cmd_split(args) -> int:
    ratio = _parse_ratio(args.ratio)
    seed = _resolve_seed(args)
    run = _Run("split", args.out_dir, seed=seed, config={
        "ratio": list(ratio), "seed": seed,
    })
    _, pairs = _load_cohort_pairs(args, run)
    plan = split_sample(pairs, ratio, seed)
    run.write_text("split.json", plan_to_json(plan))
    print(
        f"split {pairs.n_pairs} pairs: {len(plan.discovery_ids)} discovery / "
        f"{len(plan.confirmation_ids)} confirmation"
    )
    return run.finish()


def _growth_base(args, confirmation_share: float) -> GrowthConfig:
    if args.growth_config is None:
        return GrowthConfig(honest_fraction_hint=confirmation_share)
    cfg = growth_config_from_file(args.growth_config)
    path = Path(args.growth_config)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    else:
        raw = json.loads(path.read_text())
    if "honest_fraction_hint" not in raw:
        cfg = replace(cfg, honest_fraction_hint=confirmation_share)
    return cfg


def cmd_discover(args) -> int:
    methods = ["cart", "ct"] if args.method == "both" else [args.method]
    run = _Run("discover", args.out_dir, seed=None, config={"method": args.method})
    _, pairs = _load_cohort_pairs(args, run)
    plan = plan_from_json(run.add_input(args.split).read_text())
    discovery, _ = apply_split(pairs, plan)
    base = _growth_base(args, confirmation_share=plan.ratio[1])
    if args.growth_config is not None:
        run.add_input(args.growth_config)
    run.config["growth"] = {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in asdict(base).items() if k != "method"
    }

    trees = {}
    for m in methods:
        cfg = replace(base, method=m.upper())
        tree = grow(discovery, cfg)
        trees[m] = tree
        run.write_text(f"tree_{m}.json", tree.to_json())
        run.write_text(f"tree_{m}.dot", tree.to_dot(title=f"{m} tree, discovery half"))
        print(f"{m}: {tree.n_leaves} leaves on {discovery.n_pairs} discovery pairs")
    if len(methods) == 2:
        counts = {m: trees[m].n_leaves for m in methods}
        rec = "cart" if counts["cart"] > counts["ct"] else "ct"
        run.write_json("comparison.json", {
            "n_leaves": counts,
            "recommended": rec,
            "note": (
                "prefer the larger tree: the held-out confirmation test keeps "
                "its level regardless of how fine the partition is, and a "
                "finer partition can localize the effect better"
            ),
        })
        print(f"recommended tree: {rec}")
    return run.finish()


def cmd_test(args) -> int:
    seed = _resolve_seed(args)
    run = _Run("test", args.out_dir, seed=seed, config={
        "gamma": args.gamma, "alpha": args.alpha, "gamma_ci": args.gamma_ci,
        "unsafe_full_sample": bool(args.unsafe_full_sample),
    })
    data, honesty = _guarded_subset(args, run)
    tree = _load_tree(args, run)
    assigned = assign_pairs(data, tree)
    conv = build_conversion_matrix(tree)
    kind = _outcome_kind(assigned)
    test = binary_joint_test if kind == "binary" else ci_method_test
    res = test(
        assigned, conv, gamma=args.gamma, alpha=args.alpha,
        gamma_ci=args.gamma_ci, seed=seed,
    )
    run.write_json("test.json", {
        "format": "hetfx-test",
        "outcome_kind": kind,
        "honesty": honesty,
        "reject": bool(res.reject),
        "d_min": float(res.d_min),
        "tau_at_min": float(res.tau_at_min),
        "kappa": float(res.kappa),
        "gamma": float(res.gamma),
        "alpha": float(res.alpha),
        "gamma_ci": float(res.gamma_ci),
        "ci": None if res.ci is None else [float(res.ci[0]), float(res.ci[1])],
        "n_pairs": int(res.n_pairs),
        "excluded_node_ids": list(res.excluded_node_ids),
    })
    run.write_csv(
        "scan.csv",
        [{"tau": float(t), "d_max": float(d)}
         for t, d in zip(res.scan_taus, res.scan_d_max)],
        columns=["tau", "d_max"],
    )
    verdict = "reject" if res.reject else "retain"
    print(
        f"joint test ({kind}, {honesty}): {verdict}; "
        f"d_min={res.d_min:.3f} vs kappa={res.kappa:.3f} at gamma={res.gamma}"
    )
    return run.finish()


def _parse_nodes(text: str, tree: EffectTree) -> list:
    if text == "leaves":
        return list(tree.leaf_ids)
    if text == "all":
        return list(tree.comparison_ids)
    try:
        ids = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse node list {text!r}")
    if not ids:
        raise ConfigError("empty node list")
    for i in ids:
        if not 0 <= i < len(tree.nodes):
            raise DataError(f"tree has no node {i}")
        if i == 0:
            raise ConfigError("node 0 is the root, not a subgroup")
    return ids


def cmd_subgroup(args) -> int:
    seed = _resolve_seed(args)
    run = _Run("subgroup", args.out_dir, seed=seed, config={
        "gamma": args.gamma, "alpha": args.alpha, "gamma_ci": args.gamma_ci,
        "nodes": args.nodes, "truncation": args.truncation,
        "unsafe_full_sample": bool(args.unsafe_full_sample),
    })
    data, honesty = _guarded_subset(args, run)
    tree = _load_tree(args, run)
    nodes = _parse_nodes(args.nodes, tree)
    assigned = assign_pairs(data, tree)
    conv = build_conversion_matrix(tree)
    kind = _outcome_kind(assigned)
    doc = {
        "format": "hetfx-subgroups",
        "outcome_kind": kind,
        "honesty": honesty,
        "gamma": args.gamma,
        "alpha": args.alpha,
    }

    rows = []
    if kind == "continuous":
        doc["gamma_ci"] = args.gamma_ci
        res = ci_method_test(
            assigned, conv, gamma=args.gamma, alpha=args.alpha,
            gamma_ci=args.gamma_ci, seed=seed,
        )
        kept_ids, dmat = node_deviate_scan(
            assigned, conv, res.scan_taus, gamma=args.gamma
        )
        central = float(res.scan_taus[res.scan_taus.size // 2])
        joint = joint_deviates(
            assigned, conv, tau=central, gamma=args.gamma, alpha=args.alpha,
            seed=seed, kappa=res.kappa,
        )
        row_of = {nid: i for i, nid in enumerate(kept_ids)}
        for nid in nodes:
            members = [i for i in tree.comparison_descendants(nid) if i in row_of]
            row = {
                "node_id": nid,
                "label": tree.node_label(nid),
                "n_pairs": int(_node_pairs(assigned, tree, nid).n_pairs),
                "estimate": float(tree.nodes[nid].estimate),
            }
            if not members:
                row.update({"d_sub_min": None, "kappa_sub": None,
                            "reject": False, "note": "degenerate"})
            else:
                sub = subgroup_test(joint, members, args.alpha, seed=seed)
                sel = [row_of[i] for i in members]
                d_sub_min = float(np.abs(dmat[sel]).max(axis=0).min())
                row.update({
                    "d_sub_min": d_sub_min,
                    "kappa_sub": float(sub.kappa_sub),
                    "reject": bool(d_sub_min > sub.kappa_sub),
                    "members": list(members),
                })
            rows.append(row)
    else:
        pvalues = []
        for nid in nodes:
            sub = _node_pairs(assigned, tree, nid)
            p = float(mcnemar_upper_p(sub, gamma=args.gamma)) if sub.n_pairs else 1.0
            pvalues.append(p)
            rows.append({
                "node_id": nid,
                "label": tree.node_label(nid),
                "n_pairs": int(sub.n_pairs),
                "estimate": float(tree.nodes[nid].estimate),
                "upper_p": p,
                "reject": bool(p <= args.alpha),
            })
        doc["truncated_product_p"] = float(truncated_product(
            pvalues, truncation=args.truncation, seed=seed,
        ))
    doc["rows"] = rows
    run.write_json("subgroups.json", doc)
    n_rej = sum(1 for r in rows if r["reject"])
    print(f"subgroups ({kind}, {honesty}): {n_rej} of {len(rows)} rejected")
    return run.finish()


def cmd_sensitivity(args) -> int:
    seed = _resolve_seed(args)
    grid = _parse_grid(args.gamma_grid)
    deltas = None if args.delta_grid is None else _parse_grid(args.delta_grid)
    run = _Run("sensitivity", args.out_dir, seed=seed, config={
        "gamma_grid": grid, "alpha": args.alpha, "gamma_ci": args.gamma_ci,
        "truncation": args.truncation, "delta_grid": deltas,
        "unsafe_full_sample": bool(args.unsafe_full_sample),
    })
    data, honesty = _guarded_subset(args, run)
    tree = _load_tree(args, run)
    assigned = assign_pairs(data, tree)
    conv = build_conversion_matrix(tree)
    kind = _outcome_kind(assigned)
    test_fn = binary_joint_test if kind == "binary" else None
    rep = sensitivity_sweep(
        assigned, conv, grid, alpha=args.alpha, gamma_ci=args.gamma_ci,
        seed=seed, test_fn=test_fn,
    )
    run.write_csv(
        "sensitivity.csv",
        [{"gamma": r.gamma, "d_min": float(r.d_min),
          "tau_at_min": float(r.tau_at_min), "kappa": float(r.kappa),
          "reject": r.reject} for r in rep.rows],
        columns=["gamma", "d_min", "tau_at_min", "kappa", "reject"],
    )
    doc = {
        "format": "hetfx-sensitivity",
        "outcome_kind": kind,
        "honesty": honesty,
        "alpha": rep.alpha,
        "gamma_ci": rep.gamma_ci,
        "breaking_gamma": rep.breaking_gamma,
        "censored": rep.censored,
    }
    if rep.breaking_gamma is not None and rep.breaking_gamma > 1.0:
        curve = amplify(rep.breaking_gamma, deltas)
        doc["amplification"] = [
            {"lambda": lam, "delta": dl} for lam, dl in curve
        ]
    if kind == "binary":
        screen = []
        for g in grid:
            row = {"gamma": g}
            ps = []
            for nid in tree.leaf_ids:
                sub = _node_pairs(assigned, tree, nid)
                p = float(mcnemar_upper_p(sub, gamma=g)) if sub.n_pairs else 1.0
                row[f"p_node{nid}"] = p
                ps.append(p)
            row["truncated_product_p"] = float(truncated_product(
                ps, truncation=args.truncation, seed=seed,
            ))
            screen.append(row)
        run.write_csv("screen.csv", screen)
    run.write_json("sensitivity.json", doc)
    if rep.breaking_gamma is None:
        print("no rejection anywhere on the gamma grid")
    elif rep.censored:
        print(f"still rejecting at gamma={rep.breaking_gamma} (grid end; breaking point censored)")
    else:
        print(f"breaking gamma: {rep.breaking_gamma}")
    return run.finish()


def _scenario(args):
    text = args.scenario
    path = Path(text)
    if path.is_file():
        sc = scenario_from_file(path)
    else:
        name = text.rsplit("-", 1)
        if len(name) != 2 or not name[0].startswith("s") or not name[0][1:].isdigit():
            raise ConfigError(
                f"scenario {text!r} is neither a file nor a name like s2-continuous"
            )
        sc = situation(name[1], int(name[0][1:]))
    if args.n_pairs is not None:
        sc = replace(sc, n_pairs=args.n_pairs)
    env = os.environ.get("HETFX_SEED")
    if env is not None or args.seed is not None:
        sc = replace(sc, seed=_resolve_seed(args))
    return sc


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    ratio = _parse_ratio(args.ratio)
    methods = ["cart", "ct"] if args.method == "both" else [args.method]
    run = _Run("simulate", args.out_dir, seed=sc.seed, config={
        "scenario": {k: (list(v) if isinstance(v, tuple) else v)
                     for k, v in asdict(sc).items()},
        "ratio": list(ratio), "method": args.method, "table": args.table,
        "reps": args.reps, "alpha": args.alpha, "gamma_ci": args.gamma_ci,
    })
    if Path(args.scenario).is_file():
        run.add_input(args.scenario)
    power_rows, rate_rows = [], []
    for m in methods:
        if args.table in ("power", "both"):
            res = run_power(
                sc, ratio, m.upper(), gamma_ci=args.gamma_ci, alpha=args.alpha,
                reps=args.reps, threads=args.threads,
            )
            power_rows.append({
                "scenario": sc.name, "kind": sc.kind, "method": m,
                "ratio": f"{ratio[0]:g}/{ratio[1]:g}", "n_pairs": sc.n_pairs,
                "power": float(res["power"]), "mc_se": float(res["mc_se"]),
                "reps": int(res["reps"]),
            })
            print(f"{sc.name} {m}: power={res['power']:.3f} (mc se {res['mc_se']:.3f})")
        if args.table in ("discovery", "both"):
            rates = run_discovery_rates(
                sc, ratio, m.upper(), reps=args.reps, threads=args.threads,
            )
            row = {"scenario": sc.name, "kind": sc.kind, "method": m,
                   "ratio": f"{ratio[0]:g}/{ratio[1]:g}"}
            row.update({k: float(rates[k]) for k in sorted(rates)})
            rate_rows.append(row)
    if power_rows:
        run.write_csv("power.csv", power_rows)
    if rate_rows:
        run.write_csv("discovery_rates.csv", rate_rows)
    return run.finish()


def cmd_report(args) -> int:
    run = _Run("report", args.out_dir, seed=None, config={})
    tree = _load_tree(args, run)
    title = ""
    tdoc = None
    if args.test is not None:
        tdoc = json.loads(run.add_input(args.test).read_text())
        verdict = "reject" if tdoc["reject"] else "retain"
        title = (
            f"joint test: {verdict} (d_min={tdoc['d_min']:.2f}, "
            f"kappa={tdoc['kappa']:.2f}, gamma={tdoc['gamma']:g})"
        )
    annotations = {}
    sdoc = None
    if args.subgroups is not None:
        sdoc = json.loads(run.add_input(args.subgroups).read_text())
        for r in sdoc["rows"]:
            ann = {"rejected": bool(r["reject"])}
            if r.get("d_sub_min") is not None:
                ann["deviate"] = float(r["d_sub_min"])
            if "upper_p" in r:
                ann["note"] = f"upper P={r['upper_p']:.3f}"
            annotations[r["node_id"]] = ann
    run.write_text("report.dot", tree.to_dot(annotations, title=title))

    lines = ["# Confirmation report", ""]
    lines.append(f"Tree: {tree.n_leaves} leaves, {len(tree.nodes)} nodes.")
    if tdoc is not None:
        verdict = "REJECT" if tdoc["reject"] else "retain"
        lines.append("")
        lines.append(
            f"Joint test ({tdoc['outcome_kind']}): {verdict}; "
            f"d_min={tdoc['d_min']:.3f}, kappa={tdoc['kappa']:.3f}, "
            f"gamma={tdoc['gamma']:g}, level={tdoc['alpha'] + tdoc['gamma_ci']:g}."
        )
    if sdoc is not None:
        lines.append("")
        lines.append("| node | subgroup | n | estimate | reject |")
        lines.append("|---|---|---|---|---|")
        for r in sdoc["rows"]:
            mark = "yes" if r["reject"] else "no"
            lines.append(
                f"| {r['node_id']} | {r['label']} | {r['n_pairs']} "
                f"| {r['estimate']:.3f} | {mark} |"
            )
    lines.append("")
    lines.append("Solid boxes in report.dot mark rejected subgroup nulls,")
    lines.append("dashed boxes subgroups that were tested but not rejected.")
    run.write_text("report.md", "\n".join(lines) + "\n")
    return run.finish()


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="hetfx",
        description=(
            "Discover candidate effect-modification subgroups on one half of "
            "a matched-pair sample and confirm them on the other half."
        ),
    )
    sub = parser.add_subparsers(title="subcommands", dest="subcommand", metavar="SUBCOMMAND")

    p = sub.add_parser("match", help="greedily pair treated units with controls")
    _add_cohort_flags(p, with_pairs=False)
    p.add_argument("--exact-on", default="", help="comma list of categorical covariates to match exactly")
    p.add_argument("--distance-on", default="", help="comma list of numeric covariates for the distance")
    p.add_argument("--caliper", type=float, default=None,
                   help="drop pairs farther apart than this (standardized units)")
    _add_out_dir(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("balance", help="covariate balance before and after matching")
    _add_cohort_flags(p, with_pairs=True)
    _add_out_dir(p)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("split", help="partition pairs into discovery and confirmation halves")
    _add_cohort_flags(p, with_pairs=True)
    p.add_argument("--ratio", required=True,
                   help="discovery fraction ('0.25') or both fractions ('0.25,0.75')")
    p.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    _add_out_dir(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("discover", help="grow an effect tree on the discovery half")
    _add_cohort_flags(p, with_pairs=True)
    p.add_argument("--split", required=True, help="split plan from the split subcommand")
    p.add_argument("--method", choices=["cart", "ct", "both"], default="cart")
    p.add_argument("--growth-config", default=None,
                   help="JSON or TOML file of growth settings")
    _add_out_dir(p)
    p.set_defaults(func=cmd_discover)

    guard_help = "run on all pairs even though some may have grown the tree"
    p = sub.add_parser("test", help="joint confirmation test on the held-out half")
    _add_cohort_flags(p, with_pairs=True)
    p.add_argument("--split", default=None, help="split plan; the test uses its confirmation half")
    p.add_argument("--tree", required=True, help="tree JSON from discover")
    p.add_argument("--gamma", type=float, default=1.0, help="sensitivity parameter (1 = no hidden bias)")
    p.add_argument("--alpha", type=float, default=0.04)
    p.add_argument("--gamma-ci", type=float, default=0.01,
                   help="level spent on the constant-effect interval (total level alpha + gamma-ci)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--unsafe-full-sample", action="store_true", help=guard_help)
    _add_out_dir(p)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("subgroup", help="per-subgroup confirmation with subset critical values")
    _add_cohort_flags(p, with_pairs=True)
    p.add_argument("--split", default=None)
    p.add_argument("--tree", required=True)
    p.add_argument("--nodes", default="leaves",
                   help="'leaves', 'all', or a comma list of node ids")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.04)
    p.add_argument("--gamma-ci", type=float, default=0.01)
    p.add_argument("--truncation", type=float, default=0.2,
                   help="truncation point for combining binary-outcome P-values")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--unsafe-full-sample", action="store_true", help=guard_help)
    _add_out_dir(p)
    p.set_defaults(func=cmd_subgroup)

    p = sub.add_parser("sensitivity", help="sweep the test over a grid of hidden-bias levels")
    _add_cohort_flags(p, with_pairs=True)
    p.add_argument("--split", default=None)
    p.add_argument("--tree", required=True)
    p.add_argument("--gamma-grid", default="1:1.2:0.01",
                   help="'start:stop:step' (inclusive) or comma list")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--gamma-ci", type=float, default=0.0,
                   help="interval budget for the gamma = 1 row")
    p.add_argument("--truncation", type=float, default=0.2)
    p.add_argument("--delta-grid", default=None,
                   help="grid for amplifying the breaking gamma, e.g. '1.5:3:0.5'")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--unsafe-full-sample", action="store_true", help=guard_help)
    _add_out_dir(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("simulate", help="power and discovery-rate tables for a scenario")
    p.add_argument("--scenario", required=True,
                   help="scenario file (JSON/TOML) or a name like s2-continuous")
    p.add_argument("--method", choices=["cart", "ct", "both"], default="both")
    p.add_argument("--ratio", required=True, help="discovery/confirmation fractions")
    p.add_argument("--table", choices=["power", "discovery", "both"], default="both")
    p.add_argument("--reps", type=int, default=None, help="override the scenario's replication count")
    p.add_argument("--n-pairs", type=int, default=None, help="override the scenario's pair count")
    p.add_argument("--alpha", type=float, default=0.04)
    p.add_argument("--gamma-ci", type=float, default=0.01)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="override the scenario's seed")
    _add_out_dir(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render the tree with estimates and rejection flags")
    p.add_argument("--tree", required=True)
    p.add_argument("--test", default=None, help="test.json from the test subcommand")
    p.add_argument("--subgroups", default=None, help="subgroups.json from the subgroup subcommand")
    _add_out_dir(p)
    p.set_defaults(func=cmd_report)

    return parser


def _emit_error(exc: HetfxError) -> None:
    doc = {
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": exc.exit_code,
    }
    print(json.dumps(doc), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise ConfigError("a subcommand is required; see hetfx --help")
        return args.func(args)
    except SystemExit as exc:  # argparse --help
        return exc.code if isinstance(exc.code, int) else 0
    except HetfxError as exc:
        _emit_error(exc)
        return exc.exit_code
    except OSError as exc:
        name = getattr(exc, "filename", None)
        err = DataError(f"{exc.strerror or exc}: {name}" if name else str(exc))
        _emit_error(err)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
