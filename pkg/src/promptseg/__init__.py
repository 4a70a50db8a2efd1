"""Prompt tuning of frozen segmentation backbones with two-step selective
labeling, evaluated on synthetic organ/lesion data."""

from .backbone import (
    BackboneConfig,
    FrozenBackbone,
    build_backbone,
    extract_features,
    pretrain,
)
from .errors import (
    CheckpointError,
    InvalidArgumentError,
    InvalidConfigError,
    NumericError,
    PromptSegError,
    TrainingFailureError,
    UnlabeledAccessError,
)
from .harness import (
    ExperimentConfig,
    compare_strategies,
    label_oracle,
    load_config,
    run_pipeline,
)
from .losses import (
    BranchConfig,
    DEFAULT_BRANCHES,
    LossWeights,
    cross_entropy,
    diversity_loss,
    prompt_tune,
    total_loss,
    tversky_index,
    tversky_loss,
)
from .metrics import (
    CaseMetrics,
    aggregate,
    case_metrics,
    dice_per_case,
    lesion_instances,
    lesion_pr,
)
from .prompting import (
    FPU,
    MetaPrompt,
    PromptedModel,
    PromptSet,
    forward_all,
    forward_one,
    fpu_forward,
    init_prompt_set,
    tunable_parameters,
)
from .selection import (
    ScoreRecord,
    SelectionConfig,
    baseline_select,
    combined_scores,
    divergence_score,
    gradient_score,
    kcenter_greedy,
    select_batch,
)
from .synth import (
    Case,
    LesionProfile,
    Pool,
    build_pool,
    foreground_prior,
    gen_downstream_case,
    gen_pretrain_case,
)

__version__ = "0.1.0"
