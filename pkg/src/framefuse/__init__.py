"""Frame-feature aggregation for text-video retrieval over precomputed embeddings."""

from .gates import (
    FrameFeatures,
    GateParadigm,
    GateParams,
    aggregation,
    excitation,
    excitation_and_aggregation,
    frame_stats,
    gate_forward,
    init_gate,
    mean_pool,
)
from .retrieval import betweenness_audit, contrastive_loss, rank_metrics, similarity_matrix

__version__ = "0.1.0"
