"""Matched-pair data model, effect trees, and the node comparison system.

The central objects are:

* :class:`ObservationRecord`, one unit of a matched pair;
* :class:`MatchedPairSet`, an immutable collection of treated/control pairs
  with optional leaf assignments;
* :class:`EffectTree`, a binary partition of the covariate space whose leaves
  define candidate effect-modification subgroups;
* :class:`ConversionMatrix`, the 0/1 matrix mapping leaf statistics to the
  full comparison system (every leaf plus every internal node except the
  root).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError, EmptyLeafWarning, SchemaError

COVARIATE_KINDS = ("numeric", "binary", "categorical")


@dataclass(frozen=True)
class ObservationRecord:
    """A single unit: one member of a matched pair."""

    unit_id: str
    pair_id: str
    treated: bool
    outcome: float
    covariates: dict

    def __post_init__(self):
        object.__setattr__(self, "covariates", dict(self.covariates))


@dataclass(frozen=True)
class Split:
    """A binary split rule.

    Numeric/binary covariates use ``value <= threshold`` for the left child;
    categorical covariates send ``value in left_levels`` left.
    """

    covariate: str
    threshold: float | None = None
    left_levels: frozenset | None = None

    def __post_init__(self):
        if (self.threshold is None) == (self.left_levels is None):
            raise ValueError("split needs exactly one of threshold, left_levels")
        if self.left_levels is not None:
            object.__setattr__(self, "left_levels", frozenset(self.left_levels))

    def goes_left(self, value) -> bool:
        if self.threshold is not None:
            return value <= self.threshold
        return value in self.left_levels

    def describe(self, left: bool) -> str:
        if self.threshold is not None:
            op = "<=" if left else ">"
            return f"{self.covariate} {op} {self.threshold:g}"
        levels = ",".join(str(v) for v in sorted(self.left_levels))
        prefix = "" if left else "not "
        return f"{self.covariate} {prefix}in {{{levels}}}"


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    depth: int
    n_pairs: int
    estimate: float
    split: Split | None = None
    left: int | None = None
    right: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.split is None


@dataclass(frozen=True)
class EffectTree:
    """Binary tree over pair covariates; node 0 is the root.

    Nodes are stored in depth-first preorder, so ids are deterministic for a
    given shape. Leaves are candidate subgroups; the comparison system is the
    set of all leaves plus all internal nodes except the root.
    """

    nodes: tuple

    def __post_init__(self):
        if not self.nodes:
            raise DataError("tree has no nodes")
        for i, node in enumerate(self.nodes):
            if node.node_id != i:
                raise DataError("tree node ids must be 0..K-1 in storage order")
            if node.is_leaf != (node.left is None and node.right is None):
                raise DataError(f"node {i}: split/children mismatch")
            if not node.is_leaf:
                for child in (node.left, node.right):
                    if child is None or not (0 <= child < len(self.nodes)):
                        raise DataError(f"node {i}: bad child id {child}")
                    if self.nodes[child].depth != node.depth + 1:
                        raise DataError(f"node {i}: child depth mismatch")

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @cached_property
    def leaf_ids(self) -> tuple:
        """Leaf node ids in left-to-right order."""
        return tuple(n for n in self._preorder() if self.nodes[n].is_leaf)

    @cached_property
    def internal_ids(self) -> tuple:
        """Non-root internal node ids in depth-first preorder."""
        return tuple(
            n for n in self._preorder() if n != 0 and not self.nodes[n].is_leaf
        )

    @cached_property
    def comparison_ids(self) -> tuple:
        """Comparison-system node ids: internals (preorder) then leaves."""
        return self.internal_ids + self.leaf_ids

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_ids)

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes)

    @cached_property
    def split_covariates(self) -> tuple:
        return tuple(
            sorted({n.split.covariate for n in self.nodes if not n.is_leaf})
        )

    def _preorder(self) -> list:
        order = []
        stack = [0]
        while stack:
            i = stack.pop()
            order.append(i)
            node = self.nodes[i]
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)
        return order

    def descendant_leaves(self, node_id: int) -> tuple:
        """Leaf ids under ``node_id`` (the node itself if it is a leaf)."""
        out = []
        stack = [node_id]
        while stack:
            i = stack.pop()
            node = self.nodes[i]
            if node.is_leaf:
                out.append(i)
            else:
                stack.append(node.right)
                stack.append(node.left)
        return tuple(sorted(out, key=self.leaf_ids.index))

    def comparison_descendants(self, node_id: int) -> tuple:
        """Comparison-system node ids contained in the subgroup ``node_id``.

        Includes the node itself when it is part of the comparison system
        (i.e. it is not the root). This is the natural index set for a
        subgroup-restricted joint test.
        """
        keep = set()
        stack = [node_id]
        while stack:
            i = stack.pop()
            node = self.nodes[i]
            if i != 0:
                keep.add(i)
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)
        return tuple(i for i in self.comparison_ids if i in keep)

    def node_label(self, node_id: int) -> str:
        """Human-readable conjunction of split conditions from the root."""
        path = self._path_to(node_id)
        if not path:
            return "all pairs"
        terms = []
        for parent, went_left in path:
            terms.append(self.nodes[parent].split.describe(went_left))
        return " & ".join(terms)

    def _path_to(self, node_id: int) -> list:
        parent = {}
        for n in self.nodes:
            if not n.is_leaf:
                parent[n.left] = (n.node_id, True)
                parent[n.right] = (n.node_id, False)
        path = []
        i = node_id
        while i in parent:
            path.append(parent[i])
            i = parent[i][0]
        return list(reversed(path))

    def leaf_of(self, covariates: Mapping) -> int:
        """Route a single covariate mapping to its leaf id."""
        i = 0
        while not self.nodes[i].is_leaf:
            split = self.nodes[i].split
            if split.covariate not in covariates:
                raise SchemaError(f"covariate {split.covariate!r} not present")
            value = covariates[split.covariate]
            i = self.nodes[i].left if split.goes_left(value) else self.nodes[i].right
        return i

    def to_json(self) -> str:
        nodes = []
        for n in self.nodes:
            rec = {
                "id": n.node_id,
                "depth": n.depth,
                "n_pairs": n.n_pairs,
                "estimate": n.estimate,
            }
            if not n.is_leaf:
                rec["left"] = n.left
                rec["right"] = n.right
                rec["split"] = {"covariate": n.split.covariate}
                if n.split.threshold is not None:
                    rec["split"]["threshold"] = n.split.threshold
                else:
                    rec["split"]["left_levels"] = sorted(n.split.left_levels)
            nodes.append(rec)
        doc = {"format": "hetfx-tree", "version": 1, "nodes": nodes}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EffectTree":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid tree JSON: {exc}") from exc
        if doc.get("format") != "hetfx-tree":
            raise DataError("not a tree document")
        nodes = []
        for rec in doc["nodes"]:
            split = None
            if "split" in rec:
                s = rec["split"]
                if "threshold" in s:
                    split = Split(s["covariate"], threshold=s["threshold"])
                else:
                    split = Split(
                        s["covariate"], left_levels=frozenset(s["left_levels"])
                    )
            nodes.append(
                TreeNode(
                    node_id=rec["id"],
                    depth=rec["depth"],
                    n_pairs=rec["n_pairs"],
                    estimate=rec["estimate"],
                    split=split,
                    left=rec.get("left"),
                    right=rec.get("right"),
                )
            )
        nodes.sort(key=lambda n: n.node_id)
        return cls(nodes=tuple(nodes))

    def to_dot(self, annotations: Mapping | None = None, title: str = "") -> str:
        """Render to Graphviz DOT.

        ``annotations`` maps node_id to a dict with optional keys ``deviate``,
        ``rejected`` (bool) and ``note``. Nodes whose subgroup null was
        rejected are drawn as solid boxes, tested-but-not-rejected nodes as
        dashed boxes.
        """
        annotations = annotations or {}
        lines = ["digraph effect_tree {"]
        if title:
            lines.append(f'  label="{title}"; labelloc=top;')
        lines.append("  node [shape=box];")
        for n in self.nodes:
            ann = annotations.get(n.node_id, {})
            label = [f"n={n.n_pairs}", f"est={n.estimate:.3f}"]
            if n.node_id == 0:
                label.insert(0, "all pairs")
            if "deviate" in ann:
                label.append(f"deviate={ann['deviate']:.2f}")
            if "note" in ann:
                label.append(str(ann["note"]))
            style = ""
            if "rejected" in ann:
                style = ', style=solid, penwidth=2' if ann["rejected"] else ", style=dashed"
            text = "\\n".join(label)
            lines.append(f'  n{n.node_id} [label="{text}"{style}];')
        for n in self.nodes:
            if not n.is_leaf:
                lines.append(
                    f'  n{n.node_id} -> n{n.left} [label="{n.split.describe(True)}"];'
                )
                lines.append(
                    f'  n{n.node_id} -> n{n.right} [label="{n.split.describe(False)}"];'
                )
        lines.append("}")
        return "\n".join(lines) + "\n"


def _frozen(arr) -> np.ndarray:
    arr = np.asarray(arr)
    arr.flags.writeable = False
    return arr


class MatchedPairSet:
    """Immutable collection of matched treated/control pairs.

    Stores outcomes and covariates as per-pair arrays for both units. Pair
    order is preserved from construction; all derived statistics are
    order-independent.
    """

    def __init__(
        self,
        outcome_t,
        outcome_c,
        cols_t: Mapping[str, np.ndarray],
        cols_c: Mapping[str, np.ndarray],
        pair_ids=None,
        unit_ids_t=None,
        unit_ids_c=None,
        kinds: Mapping[str, str] | None = None,
        groups=None,
    ):
        self._yt = _frozen(np.asarray(outcome_t, dtype=float))
        self._yc = _frozen(np.asarray(outcome_c, dtype=float))
        n = self._yt.shape[0]
        if self._yc.shape[0] != n:
            raise DataError("outcome arrays differ in length")
        if set(cols_t) != set(cols_c):
            raise SchemaError("treated/control covariate names differ")
        self._cols_t = {k: _frozen(np.asarray(v)) for k, v in cols_t.items()}
        self._cols_c = {k: _frozen(np.asarray(v)) for k, v in cols_c.items()}
        for name, col in list(self._cols_t.items()) + list(self._cols_c.items()):
            if col.shape[0] != n:
                raise DataError(f"covariate {name!r} has wrong length")
        if pair_ids is None:
            pair_ids = np.array([f"p{i:07d}" for i in range(n)], dtype=object)
        self._pair_ids = _frozen(np.asarray(pair_ids, dtype=object))
        if len(set(self._pair_ids)) != n:
            raise DataError("pair ids are not unique")
        self._unit_t = _frozen(
            np.asarray(unit_ids_t, dtype=object)
            if unit_ids_t is not None
            else np.array([f"{p}t" for p in self._pair_ids], dtype=object)
        )
        self._unit_c = _frozen(
            np.asarray(unit_ids_c, dtype=object)
            if unit_ids_c is not None
            else np.array([f"{p}c" for p in self._pair_ids], dtype=object)
        )
        if kinds is None:
            kinds = {k: _infer_kind(v) for k, v in self._cols_t.items()}
        unknown = set(kinds) - set(self._cols_t)
        if unknown:
            raise SchemaError(f"kinds given for unknown covariates: {sorted(unknown)}")
        for k in self._cols_t:
            kinds.setdefault(k, _infer_kind(self._cols_t[k]))
        bad = {k: v for k, v in kinds.items() if v not in COVARIATE_KINDS}
        if bad:
            raise SchemaError(f"unknown covariate kinds: {bad}")
        self._kinds = dict(kinds)
        self._groups = None if groups is None else _frozen(np.asarray(groups, dtype=int))
        if self._groups is not None and self._groups.shape[0] != n:
            raise DataError("groups array has wrong length")

    @classmethod
    def from_records(
        cls, records: Iterable[ObservationRecord], kinds=None
    ) -> "MatchedPairSet":
        by_pair: dict = {}
        for rec in records:
            by_pair.setdefault(rec.pair_id, []).append(rec)
        pair_ids, treated, control = [], [], []
        for pid, members in by_pair.items():
            if len(members) != 2:
                raise DataError(f"pair {pid!r} has {len(members)} members, expected 2")
            flags = sorted(m.treated for m in members)
            if flags != [False, True]:
                raise DataError(f"pair {pid!r} needs one treated and one control unit")
            t = members[0] if members[0].treated else members[1]
            c = members[1] if members[0].treated else members[0]
            pair_ids.append(pid)
            treated.append(t)
            control.append(c)
        names = sorted(treated[0].covariates) if treated else []
        for rec in treated + control:
            if sorted(rec.covariates) != names:
                raise SchemaError(f"unit {rec.unit_id!r}: inconsistent covariate names")
        cols_t = {k: np.array([t.covariates[k] for t in treated]) for k in names}
        cols_c = {k: np.array([c.covariates[k] for c in control]) for k in names}
        return cls(
            outcome_t=[t.outcome for t in treated],
            outcome_c=[c.outcome for c in control],
            cols_t=cols_t,
            cols_c=cols_c,
            pair_ids=pair_ids,
            unit_ids_t=[t.unit_id for t in treated],
            unit_ids_c=[c.unit_id for c in control],
            kinds=kinds,
        )

    @property
    def n_pairs(self) -> int:
        return self._yt.shape[0]

    @property
    def pair_ids(self) -> np.ndarray:
        return self._pair_ids

    @property
    def covariate_names(self) -> tuple:
        return tuple(sorted(self._cols_t))

    @property
    def kinds(self) -> dict:
        return dict(self._kinds)

    @property
    def outcome_treated(self) -> np.ndarray:
        return self._yt

    @property
    def outcome_control(self) -> np.ndarray:
        return self._yc

    @property
    def groups(self):
        return self._groups

    def differences(self) -> np.ndarray:
        """Per-pair treated-minus-control outcome differences."""
        return self._yt - self._yc

    def covariate(self, name: str, unit: str = "treated") -> np.ndarray:
        cols = self._cols_t if unit == "treated" else self._cols_c
        if name not in cols:
            raise SchemaError(f"unknown covariate {name!r}")
        return cols[name]

    def pair_covariate(self, name: str) -> np.ndarray:
        """Pair-level covariate values (taken from the treated unit)."""
        return self.covariate(name, "treated")

    @property
    def group_of_pair(self) -> dict | None:
        if self._groups is None:
            return None
        return dict(zip(self._pair_ids.tolist(), self._groups.tolist()))

    @property
    def pairs(self) -> list:
        """Materialized (treated, control) record tuples."""
        out = []
        names = self.covariate_names
        for i, pid in enumerate(self._pair_ids):
            cov_t = {k: self._cols_t[k][i] for k in names}
            cov_c = {k: self._cols_c[k][i] for k in names}
            out.append(
                (
                    ObservationRecord(self._unit_t[i], pid, True, float(self._yt[i]), cov_t),
                    ObservationRecord(self._unit_c[i], pid, False, float(self._yc[i]), cov_c),
                )
            )
        return out

    def subset(self, index) -> "MatchedPairSet":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return MatchedPairSet(
            outcome_t=self._yt[index],
            outcome_c=self._yc[index],
            cols_t={k: v[index] for k, v in self._cols_t.items()},
            cols_c={k: v[index] for k, v in self._cols_c.items()},
            pair_ids=self._pair_ids[index],
            unit_ids_t=self._unit_t[index],
            unit_ids_c=self._unit_c[index],
            kinds=dict(self._kinds),
            groups=None if self._groups is None else self._groups[index],
        )

    def with_groups(self, groups) -> "MatchedPairSet":
        return MatchedPairSet(
            outcome_t=self._yt,
            outcome_c=self._yc,
            cols_t=self._cols_t,
            cols_c=self._cols_c,
            pair_ids=self._pair_ids,
            unit_ids_t=self._unit_t,
            unit_ids_c=self._unit_c,
            kinds=dict(self._kinds),
            groups=groups,
        )


def _infer_kind(col: np.ndarray) -> str:
    if col.dtype.kind in "OUS":
        return "categorical"
    values = np.unique(col[~_isnan(col)])
    if values.size <= 2 and np.all(np.isin(values, (0, 1))):
        return "binary"
    return "numeric"


def _isnan(col: np.ndarray) -> np.ndarray:
    if col.dtype.kind == "f":
        return np.isnan(col)
    return np.zeros(col.shape, dtype=bool)


@dataclass(frozen=True)
class ConversionMatrix:
    """0/1 matrix C with one row per comparison-system node, one column per
    leaf; ``C @ t`` turns leaf statistics into node statistics.

    Row order is internal nodes in depth-first preorder followed by leaves in
    left-to-right order; the joint test is invariant to this choice.
    """

    matrix: np.ndarray
    row_node_ids: tuple
    leaf_ids: tuple

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.int8)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        rows, cols = m.shape
        if rows != len(self.row_node_ids) or cols != len(self.leaf_ids):
            raise DataError("conversion matrix shape mismatch")
        if not np.all((m == 0) | (m == 1)):
            raise DataError("conversion matrix entries must be 0/1")

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_leaves(self) -> int:
        return self.matrix.shape[1]

    def row_of(self, node_id: int) -> int:
        try:
            return self.row_node_ids.index(node_id)
        except ValueError:
            raise DataError(f"node {node_id} is not in the comparison system")


def build_conversion_matrix(tree: EffectTree) -> ConversionMatrix:
    """Build the comparison-system matrix for ``tree``.

    With G leaves the matrix has 2G-2 rows (all leaves plus every internal
    node except the root) and G columns. Leaf rows are unit vectors; an
    internal row marks the leaves it contains.
    """
    leaves = tree.leaf_ids
    if len(leaves) < 2:
        raise DataError("tree has fewer than 2 leaves; no comparison system")
    col_of = {leaf: j for j, leaf in enumerate(leaves)}
    rows = []
    for node_id in tree.comparison_ids:
        row = np.zeros(len(leaves), dtype=np.int8)
        for leaf in tree.descendant_leaves(node_id):
            row[col_of[leaf]] = 1
        rows.append(row)
    return ConversionMatrix(
        matrix=np.array(rows, dtype=np.int8),
        row_node_ids=tree.comparison_ids,
        leaf_ids=leaves,
    )


def tree_from_nested(spec: Mapping) -> EffectTree:
    """Build an :class:`EffectTree` from nested dicts.

    Internal nodes carry ``split``, ``left`` and ``right``; leaves carry
    neither. Both may carry ``n_pairs`` and ``estimate``. Node ids are
    assigned in depth-first preorder.
    """
    nodes = []

    def emit(node_spec, depth):
        node_id = len(nodes)
        nodes.append(None)
        split = node_spec.get("split")
        n_pairs = int(node_spec.get("n_pairs", 0))
        estimate = float(node_spec.get("estimate", 0.0))
        if split is None:
            nodes[node_id] = TreeNode(node_id, depth, n_pairs, estimate)
        else:
            left = emit(node_spec["left"], depth + 1)
            right = emit(node_spec["right"], depth + 1)
            nodes[node_id] = TreeNode(
                node_id, depth, n_pairs, estimate, split=split, left=left, right=right
            )
        return node_id

    emit(spec, 0)
    return EffectTree(nodes=tuple(nodes))


def route_pairs(pairs: MatchedPairSet, tree: EffectTree) -> np.ndarray:
    """Vectorized leaf routing; returns a leaf id per pair.

    Both units of every pair must agree on every split covariate, so that
    the pair has a well-defined subgroup.
    """
    n = pairs.n_pairs
    for name in tree.split_covariates:
        t = pairs.covariate(name, "treated")
        c = pairs.covariate(name, "control")
        mismatch = t != c
        if np.any(mismatch):
            bad = pairs.pair_ids[mismatch][:5].tolist()
            raise DataError(
                f"pairs straddle split covariate {name!r} (e.g. {bad}); "
                "pairs must share split covariate values"
            )
        if _isnan(np.asarray(t)).any():
            raise DataError(f"split covariate {name!r} has missing values")
    at_node = np.zeros(n, dtype=int)
    for node in tree.nodes:
        if node.is_leaf:
            continue
        mask = at_node == node.node_id
        if not np.any(mask):
            continue
        col = pairs.pair_covariate(node.split.covariate)[mask]
        if node.split.threshold is not None:
            left = col.astype(float) <= node.split.threshold
        else:
            left = np.isin(col, sorted(node.split.left_levels))
        sub = np.where(left, node.left, node.right)
        at_node[mask] = sub
    return at_node


def assign_pairs(pairs: MatchedPairSet, tree: EffectTree) -> MatchedPairSet:
    """Assign every pair to its tree leaf; returns a new set, never mutates.

    Empty leaves are reported with a warning: downstream tests exclude the
    degenerate nodes explicitly rather than silently renumbering.
    """
    leaf_ids = route_pairs(pairs, tree)
    for leaf in tree.leaf_ids:
        if not np.any(leaf_ids == leaf):
            warnings.warn(
                f"leaf {leaf} ({tree.node_label(leaf)}) received no pairs",
                EmptyLeafWarning,
                stacklevel=2,
            )
    return pairs.with_groups(leaf_ids)
