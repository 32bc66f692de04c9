"""
From a subgroup tree to a family of testable comparisons
========================================================

A fitted partition of matched pairs is more than its leaves: every internal
node except the root is itself a subgroup worth testing. The conversion
matrix C makes that explicit by mapping the vector of leaf statistics T to
the statistics S = C @ T of all comparison nodes at once.
"""

import numpy as np

from hetfx import Split, build_conversion_matrix, tree_from_nested

# A three-leaf tree: males form one leaf, females split again by age.
tree = tree_from_nested(
    {
        "split": Split("male", threshold=0.5),
        "left": {"n_pairs": 40, "estimate": 0.10},
        "right": {
            "split": Split("young", threshold=0.5),
            "left": {"n_pairs": 25, "estimate": 0.55},
            "right": {"n_pairs": 35, "estimate": 0.90},
        },
    }
)

conv = build_conversion_matrix(tree)
print("comparison nodes (rows):", list(conv.row_node_ids))
print("leaves (columns):       ", list(conv.leaf_ids))
print(conv.matrix)

# Row semantics: a 1 in column j means leaf j contributes to that node.
# The first row here is the internal "male = 1" node, the union of the two
# age leaves; the remaining rows are the leaves themselves, so every
# subgroup in the tree gets a statistic.
T = np.array([12.0, 7.5, 20.0])  # one rank-sum per leaf
S = conv.matrix @ T
for node, s in zip(conv.row_node_ids, S):
    print(f"node {node}: S = {s:.1f}")

# The root is excluded on purpose: under the no-modification null the root
# statistic is what the null conditions on, not evidence against it.
