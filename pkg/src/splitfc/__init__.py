"""Feature-wise compression for split training.

The package covers the full uplink/downlink path: adaptive feature-wise
dropout, two-stage feature-wise quantization with water-filling bit
allocation, a self-describing wire format, reference baselines, and a
round-robin split-training simulator.
"""

from .allocator import (
    AllocationProblem,
    BudgetInfeasibleError,
    LevelAllocation,
    allocation_bits,
    brute_force_oracle,
    clamp_thresholds,
    closed_form_level,
    default_candidates,
    level_from_multiplier,
    levels_for_multiplier,
    objective,
    round_levels,
    solve,
    solve_continuous,
)
from .baselines import (
    TopSSparse,
    deterministic_drop,
    log2_binomial,
    max_entries_within_budget,
    rand_dropout_plan,
    topS_sparsify,
)
from .core import (
    ChannelLayout,
    ColumnStats,
    IntermediateMatrix,
    column_stats,
    make_rng,
    normalize_per_channel,
)
from .dropout import (
    DropoutMask,
    DropoutPlan,
    apply_dropout,
    backprop_scale,
    compute_probabilities,
    drop_gradients,
    keep_all_plan,
    sample_mask,
)
from .quantizer import (
    CodecConfig,
    EndpointGrid,
    QuantizedPayload,
    decode_symbols,
    encode_symbols,
    error_bound,
    fwq_decode,
    fwq_encode,
    nominal_bits,
    reconstruct_columns,
    regenerate_levels,
)
from .sim import (
    Dataset,
    SplitModel,
    TrainingConfig,
    TrainingTrace,
    evaluate,
    init_model,
    load_idx,
    partition,
    synthesize_blobs,
    train,
)
from .wire import (
    CommReport,
    WireFormatError,
    available_budget,
    build_report,
    dropout_comm_overhead,
    pack,
    unpack,
)

__version__ = "0.1.0"

__all__ = [
    "AllocationProblem",
    "BudgetInfeasibleError",
    "ChannelLayout",
    "CodecConfig",
    "ColumnStats",
    "CommReport",
    "Dataset",
    "DropoutMask",
    "DropoutPlan",
    "EndpointGrid",
    "IntermediateMatrix",
    "LevelAllocation",
    "QuantizedPayload",
    "SplitModel",
    "TopSSparse",
    "TrainingConfig",
    "TrainingTrace",
    "WireFormatError",
    "allocation_bits",
    "apply_dropout",
    "available_budget",
    "backprop_scale",
    "brute_force_oracle",
    "build_report",
    "clamp_thresholds",
    "closed_form_level",
    "column_stats",
    "compute_probabilities",
    "decode_symbols",
    "default_candidates",
    "deterministic_drop",
    "drop_gradients",
    "dropout_comm_overhead",
    "encode_symbols",
    "error_bound",
    "evaluate",
    "fwq_decode",
    "fwq_encode",
    "init_model",
    "keep_all_plan",
    "level_from_multiplier",
    "levels_for_multiplier",
    "load_idx",
    "log2_binomial",
    "make_rng",
    "max_entries_within_budget",
    "nominal_bits",
    "normalize_per_channel",
    "objective",
    "pack",
    "partition",
    "rand_dropout_plan",
    "reconstruct_columns",
    "regenerate_levels",
    "round_levels",
    "sample_mask",
    "solve",
    "solve_continuous",
    "synthesize_blobs",
    "topS_sparsify",
    "train",
    "unpack",
]
