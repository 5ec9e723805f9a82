"""Representation-learning losses. Every loss returns a :class:`LossBreakdown`."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..dataio import ActionSpace


@dataclass
class LossBreakdown:
    total: torch.Tensor
    components: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        out = {"total": _scalar(self.total)}
        out.update({k: _scalar(v) for k, v in self.components.items()})
        return out


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("loss inputs contain non-finite values")


class SimilarityFunction(nn.Module):
    """Score f(x_i, y_j) between encoded contexts and targets, divided by a temperature.

    ``dot`` is z_i . z'_j; ``bilinear`` is z_i^T W z'_j with a learned W
    (initialised to the identity).
    """

    def __init__(self, kind: str = "dot", temperature: float = 0.1, dim: int = 128):
        super().__init__()
        if kind not in ("dot", "bilinear"):
            raise ValueError(f"unknown similarity {kind!r}")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.kind = kind
        self.temperature = temperature
        self.W = nn.Parameter(torch.eye(dim)) if kind == "bilinear" else None

    def forward(self, z_ctx: torch.Tensor, z_tgt: torch.Tensor) -> torch.Tensor:
        if self.kind == "bilinear":
            z_ctx = z_ctx @ self.W.to(z_ctx.dtype)
        return z_ctx @ z_tgt.T / self.temperature


def info_nce_from_scores(scores: torch.Tensor) -> torch.Tensor:
    """-E_i[s_ii - log((1/K) sum_j exp(s_ij))] for a (B, K) score matrix, K >= B.

    Column i is the positive for row i; extra columns are additional negatives.
    The 1/K inside the log keeps the objective bounded above by log K.
    """
    B, K = scores.shape
    if K < B:
        raise ValueError("need at least as many candidates as contexts")
    positives = scores.diagonal()
    log_mean_exp = torch.logsumexp(scores, dim=1) - math.log(K)
    return -(positives - log_mean_exp).mean()


def info_nce_loss(z_ctx: torch.Tensor, z_tgt: torch.Tensor, sim: SimilarityFunction,
                  negatives: torch.Tensor | None = None) -> LossBreakdown:
    """InfoNCE with in-batch negatives (plus optional queued ``negatives``)."""
    if z_ctx.shape[0] < 1 or z_ctx.shape != z_tgt.shape:
        raise ValueError("contexts and targets must be aligned (B, d) batches with B >= 1")
    _check_finite(z_ctx, z_tgt)
    candidates = z_tgt if negatives is None else torch.cat([z_tgt, negatives.to(z_tgt.dtype)])
    loss = info_nce_from_scores(sim(z_ctx, candidates))
    return LossBreakdown(loss, {"contrastive": loss})


def gaussian_kl_standard(mean: torch.Tensor, log_variance: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, diag exp(log_variance)) || N(0, I)) per row."""
    return 0.5 * (mean.pow(2) + log_variance.exp() - 1.0 - log_variance).sum(dim=-1)


def vae_loss(recon: torch.Tensor, target: torch.Tensor, mean: torch.Tensor,
             log_variance: torch.Tensor, beta: float) -> LossBreakdown:
    """Per-element MSE plus beta times the batch-mean KL to the unit Gaussian prior."""
    if recon.shape != target.shape:
        raise ValueError(f"reconstruction {tuple(recon.shape)} vs target {tuple(target.shape)}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    mse = F.mse_loss(recon, target)
    kl = gaussian_kl_standard(mean, log_variance).mean()
    return LossBreakdown(mse + beta * kl, {"reconstruction": mse, "kl": kl})


def dynamics_loss(predicted_next_obs: torch.Tensor, actual_next_obs: torch.Tensor) -> LossBreakdown:
    if predicted_next_obs.shape != actual_next_obs.shape:
        raise ValueError("prediction and target shapes differ")
    mse = F.mse_loss(predicted_next_obs, actual_next_obs)
    return LossBreakdown(mse, {"reconstruction": mse})


def gaussian_nll(mean: torch.Tensor, log_std: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Negative log density of x under N(mean, diag exp(2 log_std)), summed over the last axis."""
    z = (x - mean) * torch.exp(-log_std)
    return (0.5 * z.pow(2) + log_std + 0.5 * math.log(2 * math.pi)).sum(dim=-1)


def inverse_dynamics_loss(prediction, true_action: torch.Tensor,
                          action_space: ActionSpace | None = None) -> LossBreakdown:
    """Cross-entropy on logits, or Gaussian NLL when ``prediction`` is (mean, log_std)."""
    if isinstance(prediction, tuple):
        mean, log_std = prediction
        true_action = torch.as_tensor(true_action, dtype=mean.dtype)
        if true_action.shape != mean.shape:
            raise ValueError("continuous action shape does not match prediction")
        nll = gaussian_nll(mean, log_std, true_action).mean()
    else:
        true_action = torch.as_tensor(true_action).long()
        n = prediction.shape[1]
        if action_space is not None and action_space.size != n:
            raise ValueError("logit width does not match the action space")
        if true_action.numel() and (true_action.min() < 0 or true_action.max() >= n):
            raise ValueError(f"action outside discrete({n})")
        nll = F.cross_entropy(prediction, true_action)
    return LossBreakdown(nll, {"nll": nll})


def gaussian_log_density(z: torch.Tensor, mean: torch.Tensor, log_variance: torch.Tensor) -> torch.Tensor:
    return -gaussian_nll(mean, 0.5 * log_variance, z)


def ceb_contrastive_term(z: torch.Tensor, tgt_mean: torch.Tensor,
                         tgt_log_variance: torch.Tensor) -> torch.Tensor:
    """Classify which target's backward density explains each sample z_i.

    Scores are s_ij = log b(z_i | y_j), fed through the same InfoNCE form as the
    contrastive losses.
    """
    diff = z[:, None, :] - tgt_mean[None, :, :]
    inv_var = torch.exp(-tgt_log_variance)[None, :, :]
    scores = -0.5 * (diff.pow(2) * inv_var + tgt_log_variance[None] + math.log(2 * math.pi)).sum(-1)
    return info_nce_from_scores(scores)


def ceb_gamma(rho: float) -> float:
    return math.exp(-rho)


def ceb_loss(z_sample: torch.Tensor, ctx_dist, tgt_dist, contrastive_term: torch.Tensor,
             rho: float | None = None, gamma: float | None = None) -> LossBreakdown:
    """gamma * E[log e(z|x) - log b(z|y)] + contrastive term, gamma = exp(-rho) unless given."""
    if not (isinstance(ctx_dist, tuple) and isinstance(tgt_dist, tuple)):
        raise TypeError("CEB needs Gaussian (mean, log_variance) context and target encoders")
    if gamma is None:
        if rho is None:
            raise ValueError("give either rho or gamma")
        gamma = ceb_gamma(rho)
    log_e = gaussian_log_density(z_sample, *ctx_dist)
    log_b = gaussian_log_density(z_sample, *tgt_dist)
    compression = (log_e - log_b).mean()
    total = gamma * compression + contrastive_term
    return LossBreakdown(total, {"compression": compression, "contrastive": contrastive_term,
                                 "gamma": torch.tensor(gamma)})
