"""Streaming selective-escalation detection.

A cheap window scorer answers most timestamps of a live multimodal stream;
a router escalates low-confidence or label-changing steps to an expensive
expert and may defer when even the expert is unsure. Training of the cheap
scorer combines a cross-modal contrastive objective with an IoU-weighted
cross-entropy that damps label interference near segment boundaries.
"""

from .encoder import (
    ConfidenceModel,
    EncoderConfig,
    ScorerOutput,
    TrainableScorer,
    TraceScorer,
    export_trace,
    load_checkpoint,
    load_trace,
    make_synthetic_oracle,
    oracle_for_dataset,
    save_checkpoint,
    train,
)
from .expert import (
    ExpertConnectionError,
    ExpertError,
    ExpertOutput,
    ExpertProtocolError,
    ExpertRequest,
    ExpertTimeoutError,
    HttpExpert,
    LocalOracleExpert,
    StubBehavior,
    StubExpertServer,
    make_local_oracle,
)
from .harness import (
    DecisionLog,
    DecisionRecord,
    LatencyModel,
    MetricsReport,
    PRESETS,
    compute_metrics,
    evaluate,
    hybrid_dominance_benchmark,
    preset_allow_both,
    preset_encoder_only,
    preset_expert_always,
    preset_no_defer,
    preset_no_vlm,
    resolve_deferrals,
    run_stream,
    sweep,
)
from .losses import (
    BatchEmbeddings,
    LossConfig,
    SupervisedBatch,
    contrastive_loss,
    cosine_similarity,
    cross_modal_loss,
    finite_difference_check,
    gradient,
    iou_weighted_ce,
    total_loss,
)
from .dataset_io import DatasetFormatError, load_dataset, save_dataset
from .router import (
    Decision,
    MetaRouter,
    Router,
    RouterConfig,
    RoutingState,
    enc_threshold,
    predict_meta,
    train_meta_router,
    vlm_threshold,
)
from .stream import (
    MODALITIES,
    UNLABELED,
    ModalityTrack,
    SegmentAnnotation,
    StreamConfig,
    StreamDataset,
    StreamWindow,
    TimestepFeatures,
    VideoStream,
    aggregate_modality,
    extract_window,
    propagate_labels,
    split_by_video,
    temporal_iou,
)
from .synthetic import SyntheticConfig, generate_dataset

__version__ = "0.1.0"
