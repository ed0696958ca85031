"""Multi-exit self-ensembles via network fission.

Turns a staged backbone into an N-exit ensemble by partitioning stage weights
into disjoint groups (optionally after pruning-at-initialization), trains the
exits against an averaged-logits distillation teacher, and reports accuracy,
calibration, diversity, and compute-cost metrics.
"""

from .errors import (
    ConfigError,
    DataError,
    DeadExitError,
    NfeError,
    TrainingDivergedError,
)
from .fission import (
    ExecutionDag,
    FissionPlan,
    GroupMaskSet,
    apply_pai,
    build_execution_dag,
    build_group_masks,
    default_plan,
    exit_path_groups,
    group_for,
    load_mask_container,
    make_plan,
    parse_variant_name,
    partition_stage,
    save_mask_container,
)

__version__ = "0.1.0"
