from .algorithms import (
    ABLATIONS, MAIN_ALGORITHMS, RepLAlgorithmSpec, algorithm_names, build_named_algorithm)
from .losses import (
    LossBreakdown, SimilarityFunction, ceb_contrastive_term, ceb_loss, dynamics_loss,
    info_nce_loss, inverse_dynamics_loss, vae_loss)
from .training import BatchSampler, PairBatches, RepLModel, train_repl, write_loss_history

__all__ = [
    "ABLATIONS", "MAIN_ALGORITHMS", "RepLAlgorithmSpec", "algorithm_names", "build_named_algorithm",
    "LossBreakdown", "SimilarityFunction", "ceb_contrastive_term", "ceb_loss", "dynamics_loss",
    "info_nce_loss", "inverse_dynamics_loss", "vae_loss", "BatchSampler", "PairBatches", "RepLModel",
    "train_repl",
    "write_loss_history",
]
