"""Federated hybrid retrieval with chat-model re-ranking for next-item recommendation."""

__version__ = "0.1.0"

from .data import Catalog, FederatedSplit, ItemMeta, SplitConfig, UserSequence, synth_heterogeneous  # noqa: E402
from .federation import GlobalModel, RoundConfig, fedavg, run_federated_training  # noqa: E402
from .hybrid import CandidateSet, HybridConfig, hybrid_scores, retrieve_top_n, softmax  # noqa: E402
from .metrics import MetricReport, ndcg_at_k, recall_at_k  # noqa: E402

__all__ = [
    "CandidateSet", "Catalog", "FederatedSplit", "GlobalModel", "HybridConfig", "ItemMeta", "MetricReport",
    "RoundConfig", "SplitConfig", "UserSequence", "fedavg", "hybrid_scores", "ndcg_at_k", "recall_at_k",
    "retrieve_top_n", "run_federated_training", "softmax", "synth_heterogeneous",
]
