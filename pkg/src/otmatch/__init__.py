"""otmatch: correspondence matching via partial optimal transport.

Support and query feature grids become suppliers and demanders of a
transportation problem with cosine costs; a fixed matched mass turns it into
a partial problem, balanced with dummy nodes and solved by log-domain
Sinkhorn (with an exact simplex oracle for verification). Flow from
foreground support nodes yields per-pixel foreground probabilities, scored
with IoU-family metrics. An attention message-flow stage can enhance the
features beforehand.
"""

from .errors import (
    ConfigError,
    ConvergenceError,
    CorruptFile,
    DataError,
    DegenerateFeature,
    EmptyInput,
    EmptySupportForeground,
    FormatError,
    InfeasibleFlow,
    InvalidBox,
    InvalidShape,
    InvalidThreshold,
    IoError,
    IsolatedNode,
    MatchError,
    OracleTooLarge,
    ShapeMismatch,
)
from .tensorio import (
    BinaryMask,
    BoundingBox,
    FeatureGrid,
    downsample_mask,
    mask_from_bbox,
    read_episode,
    read_tensor,
    write_tensor,
)
from .synth import EpisodeSpec, generate_synthetic_episode
from .otcore import (
    BalancedProblem,
    MarginalWeights,
    SinkhornConfig,
    TransportPlan,
    build_partial_problem,
    cosine_cost_matrix,
    exact_solve_oracle,
    round_to_feasible,
    sinkhorn_solve,
    strip_dummies,
    transport_cost,
    unit_weights,
)
from .flow import (
    AttentionParams,
    FlowSchedule,
    GraphNodeState,
    ParameterStore,
    PositionalEncoder,
    attention_aggregate,
    cross_flow_step,
    fuse_position,
    grid_neighbors,
    inner_flow_step,
    load_parameter_store,
    positional_encode,
    residual_update,
    run_message_flow,
    save_parameter_store,
)
from .correspond import (
    FilteredPlan,
    best_match_map,
    filter_by_support_mask,
    foreground_probability_map,
    prior_mask,
    threshold_prediction,
)
from .metrics import (
    ConfusionCounts,
    MetricReport,
    confusion_counts,
    fb_iou,
    iou,
    mean_iou,
    render_report,
    score_prediction,
)
from .pipeline import PipelineConfig, run_match, run_suite

__version__ = "0.1.0"
