"""hetfx: discovery and confirmation of treatment effect modification in
matched-pair designs, with sensitivity analysis for unmeasured bias."""

from .errors import (
    BracketClampWarning,
    ConfigError,
    DataError,
    DiscoveryWarning,
    EmptyLeafWarning,
    HetfxError,
    MatchingWarning,
    NumericError,
    SchemaError,
)
from .model import (
    ConversionMatrix,
    EffectTree,
    MatchedPairSet,
    ObservationRecord,
    Split,
    TreeNode,
    assign_pairs,
    build_conversion_matrix,
    route_pairs,
    tree_from_nested,
)
from .jointtest import (
    CiTestResult,
    GroupMoments,
    JointDeviates,
    SensitivityReport,
    SubgroupResult,
    ci_method_test,
    joint_deviates,
    mvn_equicoordinate_quantile,
    node_deviate_scan,
    sensitivity_sweep,
    signed_rank_moments,
    subgroup_test,
)
from .binary import (
    BinaryEstimate,
    amplify,
    amplify_point,
    binary_estimate,
    binary_joint_test,
    compatible_bracket,
    mcnemar_upper_p,
    truncated_product,
    worst_case_mean_shift,
    worst_case_variance,
)

from .discovery import (
    GrowthConfig,
    SplitPlan,
    apply_split,
    grow,
    grow_cart,
    grow_ct,
    growth_config_from_file,
    plan_from_json,
    plan_to_json,
    split_sample,
)
from .ingest import (
    BalanceReport,
    BalanceRow,
    CohortTable,
    MatchReport,
    balance,
    greedy_match,
    greedy_match_report,
    load_cohort,
    load_pairs,
    save_cohort,
    save_pairs,
)

from .simlab import (
    Scenario,
    generate,
    run_discovery_rates,
    run_power,
    scenario_from_file,
    situation,
    write_rows,
)

__version__ = "0.1.0"
