"""Imitation learners that consume the RepL encoders: behavioral cloning and GAIL."""
from .bc import BCBatches, BCConfig, batch_accuracy, bc_loss, l2_penalty, train_bc
from .gail import (
    MAGICAL_GAIL, DiscriminatorTrainer, GAILConfig, RewardNormalizer, RolloutBuffer,
    collect_rollouts,
    discriminator_accuracy, discriminator_bce, discriminator_loss, expert_arrays, gae_advantages,
    gail_raw_reward, gail_reward, normalize_advantages, ppo_loss, ppo_update, train_gail)
from .networks import Discriminator, Policy, sample_actions

__all__ = [
    "BCBatches", "BCConfig", "batch_accuracy", "bc_loss", "l2_penalty", "train_bc",
    "MAGICAL_GAIL", "DiscriminatorTrainer", "GAILConfig", "RewardNormalizer", "RolloutBuffer",
    "collect_rollouts",
    "discriminator_accuracy", "discriminator_bce", "discriminator_loss", "expert_arrays",
    "gae_advantages", "gail_raw_reward", "gail_reward", "normalize_advantages", "ppo_loss",
    "ppo_update", "train_gail", "Discriminator", "Policy", "sample_actions",
]
