"""Behavioral cloning: maximum-likelihood fitting of a policy to demonstrations."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ..augment import AugmentationSpec, AugmentMode, apply_augmentations, default_augmentations
from ..dataio import TrajectoryDataset, stacked_observations
from ..models import obs_to_tensor
from ..repl.losses import LossBreakdown
from ..repl.training import BatchSampler
from .networks import Policy


@dataclass(frozen=True)
class BCConfig:
    learning_rate: float = 1e-4
    entropy_coeff: float = 1e-3
    l2_coeff: float = 1e-5
    batch_size: int = 32
    training_batches: int = 20000
    augmentation: AugmentationSpec = field(default_factory=lambda: default_augmentations(AugmentMode.BOTH))

    def __post_init__(self):
        if min(self.entropy_coeff, self.l2_coeff) < 0:
            raise ValueError("BC coefficients must be non-negative")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.training_batches < 0:
            raise ValueError("learning rate and batch size must be positive, batches non-negative")

    def to_config(self) -> dict:
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_config()
        return d

    @classmethod
    def from_config(cls, d: dict) -> "BCConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown BC keys {sorted(unknown)}")
        if "augmentation" in d:
            d["augmentation"] = AugmentationSpec.from_config(d["augmentation"], AugmentMode.BOTH)
        return cls(**d)


def l2_penalty(params) -> torch.Tensor:
    return sum(p.pow(2).sum() for p in params)


def bc_loss(policy: Policy, obs: torch.Tensor, actions, config: BCConfig) -> LossBreakdown:
    """-mean log pi(a|x) - w_ent * mean H(pi(.|x)) + l2 * ||theta||^2.

    ``obs`` is expected to be augmented already.
    """
    dist = policy.distribution(obs)
    if policy.action_space.discrete:
        actions = torch.as_tensor(actions).long()
        n = policy.action_space.size
        if actions.numel() and (actions.min() < 0 or actions.max() >= n):
            raise ValueError(f"action outside discrete({n})")
    else:
        actions = torch.as_tensor(actions, dtype=obs.dtype)
    nll = -dist.log_prob(actions).mean()
    entropy = dist.entropy().mean()
    l2 = l2_penalty(policy.bc_parameters())
    total = nll - config.entropy_coeff * entropy + config.l2_coeff * l2
    return LossBreakdown(total, {"nll": nll, "entropy": entropy, "l2": l2})


class BCBatches:
    """Shuffled minibatches of (augmented observation, action) from a demonstration set."""

    def __init__(self, dataset: TrajectoryDataset, batch_size: int, augmentation: AugmentationSpec,
                 rng: np.random.Generator):
        self.obs, self.actions, _, _ = stacked_observations(dataset)
        if len(self.obs) == 0:
            raise ValueError("BC needs a non-empty dataset")
        self.sampler = BatchSampler(len(self.obs), batch_size, rng)
        self.augmentation, self.rng = augmentation, rng

    def next(self):
        rows = self.sampler.next()
        obs = obs_to_tensor(self.obs[rows])
        if self.augmentation.mode != AugmentMode.NONE:
            obs = apply_augmentations(self.augmentation, obs, self.rng)
        return obs, torch.as_tensor(np.asarray(self.actions[rows]))


def _check_compatible(policy: Policy, dataset: TrajectoryDataset) -> None:
    if policy.action_space != dataset.action_space:
        raise ValueError(f"policy head is for {policy.action_space}, dataset has {dataset.action_space}")


def batch_accuracy(policy: Policy, obs: torch.Tensor, actions) -> float:
    if not policy.action_space.discrete:
        return float("nan")
    with torch.no_grad():
        return float((policy(obs).argmax(-1) == torch.as_tensor(actions)).float().mean())


def train_bc(policy: Policy, dataset: TrajectoryDataset, config: BCConfig, rng: np.random.Generator,
             callbacks: Sequence[Callable] = ()):
    """Adam on shuffled, augmented minibatches; returns ``(policy, history)``.

    History rows hold ``step``, ``total``, ``nll``, ``entropy`` and ``l2``.
    """
    _check_compatible(policy, dataset)
    history = []
    if config.training_batches == 0:
        return policy, history
    batches = BCBatches(dataset, config.batch_size, config.augmentation, rng)
    optimizer = torch.optim.Adam(policy.bc_parameters(), lr=config.learning_rate)
    policy.train()
    for step in range(config.training_batches):
        obs, actions = batches.next()
        out = bc_loss(policy, obs, actions, config)
        if not torch.isfinite(out.total):
            raise FloatingPointError(f"non-finite BC loss at step {step}: {out.scalars()}")
        optimizer.zero_grad(set_to_none=True)
        out.total.backward()
        optimizer.step()
        record = {"step": step, **out.scalars()}
        history.append(record)
        for cb in callbacks:
            cb(step, record, policy)
    return policy, history
