"""Interpretation stack: embedding, clustering, transitions and signals."""

from .cluster import (
    K_CANDIDATES,
    ClusterModel,
    KMeansResult,
    OutcomeLabels,
    kmeans_fit,
    kmeans_plus_plus,
    label_clusters_by_outcome,
    lloyd,
    silhouette,
)
from .embed import N_NEIGHBORS_GRID, Embedding2D, UmapModel, embed_trajectories, pool_trajectories, umap_embed, umap_fit
from .metrics import canonical_correlations, mean_canonical_correlation, probe_auc, r_squared
from .signals import TOP_N_ALL, TOP_N_DRUG, SignalReport, SubcohortResult, signal_report, subcohort_analysis
from .transitions import POPULATIONS, TransitionTable, transition_table, transition_tables

__all__ = [
    "K_CANDIDATES",
    "N_NEIGHBORS_GRID",
    "POPULATIONS",
    "TOP_N_ALL",
    "TOP_N_DRUG",
    "ClusterModel",
    "Embedding2D",
    "KMeansResult",
    "OutcomeLabels",
    "SignalReport",
    "SubcohortResult",
    "TransitionTable",
    "UmapModel",
    "canonical_correlations",
    "embed_trajectories",
    "kmeans_fit",
    "kmeans_plus_plus",
    "label_clusters_by_outcome",
    "lloyd",
    "mean_canonical_correlation",
    "pool_trajectories",
    "probe_auc",
    "r_squared",
    "signal_report",
    "silhouette",
    "subcohort_analysis",
    "transition_table",
    "transition_tables",
    "umap_embed",
    "umap_fit",
]
