"""Step-wise training for long-tailed object detection on synthetic shape data.

The package covers the full loop: a Zipf-distributed shape-world generator, a
small query-based detector with a class-specific/class-agnostic parameter
split, confidence-guided exemplar replay subsets, the three-stage training
pipeline (pretrain, head-expert fine-tune, knowledge transfer with feature and
class distillation), COCO-style AP evaluation, and a stage-per-command CLI.
"""

from .dataset import (
    Annotation,
    CategoryPartition,
    DetectionDataset,
    FrequencyGroups,
    GeneratorConfig,
    ImageRecord,
    frequency_groups,
    generate_shapeworld,
    load_annotations,
    partition_head_tail,
    save_annotations,
)
from .detector import (
    DetectorConfig,
    ForwardOutput,
    ShapeDetector,
    load_checkpoint,
    save_checkpoint,
    set_trainable,
    snapshot,
)
from .evaluation import Detection, MetricsTable, average_precision, grouped_metrics
from .losses import (
    HeadMask,
    LossWeights,
    MatchResult,
    build_head_mask,
    class_distill,
    feature_distill,
    giou,
    hungarian_loss,
    match_hungarian,
    sigmoid_focal_loss,
    total_loss,
)
from .pipeline import (
    RunConfig,
    RunReport,
    StageConfig,
    evaluate_model,
    finetune_head_expert,
    knowledge_transfer,
    pretrain,
    run_stepwise,
)
from .replay import (
    ReplayBudget,
    ReplaySubset,
    ScoredInstance,
    build_head_dominant,
    build_tail_dominant,
    epoch_sampling_plan,
    repeat_factors,
    score_instances,
    select_exemplars,
)

__version__ = "0.1.0"
