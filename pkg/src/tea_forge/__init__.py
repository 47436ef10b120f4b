"""Temporal entity alignment toolkit.

Library surface: a temporal knowledge graph data model with dataset I/O
and a synthetic twin-graph generator, dual-aspect feature encoders with
richness-guided attention and adaptive fusion, dual-view neighborhood
consensus de-noising, bi-directional seed expansion, and an evaluation /
orchestration layer behind the `tea-forge` CLI.
"""

from .consensus import (
    ConsensusParams,
    TopKSimilarity,
    dual_view_concat,
    randomized_propagation,
    refine,
    sinkhorn,
    topk_retrieve,
    train_consensus,
)
from .encoders import (
    EncoderConfig,
    EncoderState,
    contrastive_loss,
    load_checkpoint,
    mixed_embed,
    restore_state,
    save_checkpoint,
    train_stage,
)
from .features import (
    BipartiteFeatureMatrix,
    FeatureType,
    RichnessProfile,
    build_bipartite,
    init_features,
    reference_similarity,
    richness_bins,
)
from .pipeline import (
    MetricReport,
    PipelineResult,
    RunConfig,
    SimilarityView,
    ablate,
    evaluate,
    rank_and_predict,
    run_pipeline,
    select_seeds,
    similarity_views,
)
from .synthetic import generate_synthetic_task
from .theorems import TheoremReport, TheoremSweepConfig, check_theorems
from .tkg import (
    AlignmentTask,
    Fact,
    SeedAlignment,
    TemporalKnowledgeGraph,
    feature_counts,
    load_task,
    save_task,
)

__version__ = "0.1.0"
