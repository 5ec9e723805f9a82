"""Adversarial imitation: discriminator, shaped reward, GAE and a PPO policy optimiser.

Sign convention: the discriminator logit l parameterises D = sigmoid(l), the
probability that a sample came from the *policy*. Its loss is

    -E_policy[log D] - E_expert[log(1 - D)]

so D -> 1 on policy data and D -> 0 on expert data. The policy reward is
computed from the expert logit -l as  -log(1 - sigmoid(-l)) = softplus(-l),
which is positive and grows as a sample looks more expert-like.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..augment import AugmentationSpec, AugmentMode, apply_augmentations, discriminator_augmentations
from ..dataio import TrajectoryDataset, stacked_observations
from ..models import obs_to_tensor
from ..repl.losses import LossBreakdown
from .networks import Discriminator, Policy, sample_actions

REWARD_FORMS = ("positive", "logit")


@dataclass(frozen=True)
class GAILConfig:
    """PPO and discriminator settings.

    Defaults are tuned for the bench gridworld within the usual tuning
    ranges. ``MAGICAL_GAIL`` holds the settings used for MAGICAL-style tasks.
    """
    n_parallel_envs: int = 32
    steps_per_round: int = 128  # per environment
    epochs_per_round: int = 12
    minibatch_size: int = 48
    policy_lr: float = 5e-4  # linearly annealed to 0 over training
    gamma: float = 0.99
    gae_lambda: float = 0.76
    clip_eps: float = 0.1
    entropy_coeff: float = 1e-3
    value_coeff: float = 0.5
    max_grad_norm: float = 1.0
    disc_lr: float = 1e-3
    disc_batch_size: int = 48
    disc_steps_per_round: int = 8
    disc_augmentation: AugmentationSpec = field(default_factory=discriminator_augmentations)
    total_env_steps: int = 500_000
    reward_norm_std: float = 0.01
    reward_norm_decay: float = 0.99
    # "logit" can go negative, so ending an episode early at the goal is not penalised
    reward_form: str = "logit"

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.reward_form not in REWARD_FORMS:
            raise ValueError(f"reward_form must be one of {REWARD_FORMS}")
        if min(self.n_parallel_envs, self.steps_per_round, self.epochs_per_round,
               self.minibatch_size, self.disc_batch_size) < 1 or self.total_env_steps < 0:
            raise ValueError("GAIL sizes must be positive")

    @property
    def steps_per_round_total(self) -> int:
        return self.n_parallel_envs * self.steps_per_round

    @property
    def n_rounds(self) -> int:
        return self.total_env_steps // self.steps_per_round_total

    def to_config(self) -> dict:
        d = asdict(self)
        d["disc_augmentation"] = self.disc_augmentation.to_config()
        return d

    @classmethod
    def from_config(cls, d: dict) -> "GAILConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown GAIL keys {sorted(unknown)}")
        if "disc_augmentation" in d:
            d["disc_augmentation"] = AugmentationSpec.from_config(d["disc_augmentation"], AugmentMode.BOTH)
        return cls(**d)


MAGICAL_GAIL = dict(epochs_per_round=7, policy_lr=2.5e-4, clip_eps=0.006, entropy_coeff=4.5e-8,
                    disc_lr=5.7e-4, disc_steps_per_round=2, reward_form="positive")



# ---------------------------------------------------------------------------
# discriminator


def discriminator_bce(policy_logits: torch.Tensor, expert_logits: torch.Tensor) -> LossBreakdown:
    """-mean log D(policy) - mean log(1 - D(expert)), computed in logit space."""
    if policy_logits.numel() == 0 or expert_logits.numel() == 0:
        raise ValueError("discriminator loss needs non-empty expert and policy batches")
    policy_term = F.softplus(-policy_logits).mean()
    expert_term = F.softplus(expert_logits).mean()
    correct = torch.cat([policy_logits > 0, expert_logits <= 0]).float().mean()
    return LossBreakdown(policy_term + expert_term,
                         {"policy_term": policy_term, "expert_term": expert_term,
                          "accuracy": correct})


def discriminator_loss(disc: Discriminator, expert_batch, policy_batch,
                       augmentation: Optional[AugmentationSpec], rng: np.random.Generator) -> LossBreakdown:
    """BCE of the discriminator on (obs, action) batches; both streams are augmented."""
    (e_obs, e_act), (p_obs, p_act) = expert_batch, policy_batch
    if len(e_obs) == 0 or len(p_obs) == 0:
        raise ValueError("discriminator loss needs non-empty expert and policy batches")
    if augmentation is not None and augmentation.ops:
        e_obs = apply_augmentations(augmentation, e_obs, rng)
        p_obs = apply_augmentations(augmentation, p_obs, rng)
    return discriminator_bce(disc(p_obs, p_act), disc(e_obs, e_act))


@torch.no_grad()
def discriminator_accuracy(disc: Discriminator, expert_batch, policy_batch, chunk: int = 256) -> float:
    """Fraction of samples classified correctly (policy: logit > 0, expert: logit <= 0)."""
    correct, total = 0, 0
    for (obs, act), is_policy in ((expert_batch, False), (policy_batch, True)):
        for i in range(0, len(obs), chunk):
            logits = disc(obs[i:i + chunk], act[i:i + chunk])
            correct += int(((logits > 0) == is_policy).sum())
            total += len(logits)
    return correct / total


class DiscriminatorTrainer:
    """Adam on the discriminator with augmented expert and policy minibatches."""

    def __init__(self, disc: Discriminator, lr: float, batch_size: int,
                 augmentation: Optional[AugmentationSpec], rng: np.random.Generator):
        self.disc, self.batch_size, self.augmentation, self.rng = disc, batch_size, augmentation, rng
        self.optimizer = torch.optim.Adam(disc.parameters(), lr=lr)

    def _draw(self, obs: np.ndarray, actions: np.ndarray):
        rows = self.rng.integers(len(obs), size=self.batch_size)
        return obs_to_tensor(obs[rows]), torch.as_tensor(np.asarray(actions[rows]))

    def step(self, expert_obs, expert_actions, policy_obs, policy_actions) -> LossBreakdown:
        out = discriminator_loss(self.disc, self._draw(expert_obs, expert_actions),
                                 self._draw(policy_obs, policy_actions), self.augmentation, self.rng)
        if not torch.isfinite(out.total):
            raise FloatingPointError(f"non-finite discriminator loss: {out.scalars()}")
        self.optimizer.zero_grad(set_to_none=True)
        out.total.backward()
        self.optimizer.step()
        return out


# ---------------------------------------------------------------------------
# reward


def gail_raw_reward(expert_logit: torch.Tensor, form: str = "positive") -> torch.Tensor:
    """``positive``: -log(1 - sigmoid(l)); ``logit``: log D - log(1 - D) = l, with l the expert logit."""
    if form == "positive":
        return F.softplus(expert_logit)
    if form == "logit":
        return expert_logit
    raise ValueError(f"unknown reward form {form!r}")


@dataclass
class RewardNormalizer:
    """Rescales rewards so their running standard deviation tracks ``target_std``.

    Mean and variance are exponential moving estimates with the given decay,
    seeded from the first update. Rewards are only rescaled, never shifted, so
    the sign of the raw reward is preserved.
    """

    target_std: float = 0.01
    decay: float = 0.99
    mean: float = 0.0
    var: float = 1.0
    initialized: bool = False
    eps: float = 1e-8

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        if not self.initialized:
            self.mean = float(x.mean())
            self.var = float(x.var())
            self.initialized = True
            return
        d = self.decay
        self.mean = d * self.mean + (1 - d) * float(x.mean())
        self.var = d * self.var + (1 - d) * float(((x - self.mean) ** 2).mean())

    @property
    def scale(self) -> float:
        return self.target_std / math.sqrt(self.var + self.eps)

    def normalize(self, x):
        return x * self.scale


@torch.no_grad()
def gail_reward(disc: Discriminator, obs: torch.Tensor, actions, normalizer: RewardNormalizer,
                form: str = "positive", update: bool = True) -> torch.Tensor:
    """Normalised policy reward for a batch of (obs, action)."""
    raw = gail_raw_reward(-disc(obs, actions), form)
    if update:
        normalizer.update(raw.numpy())
    return normalizer.normalize(raw)


# ---------------------------------------------------------------------------
# GAE and PPO


def gae_advantages(rewards, values, dones, gamma: float, lam: float, last_value=0.0) -> np.ndarray:
    """Generalised advantage estimates along axis 0 (time).

    ``dones[t]`` marks that the episode ended after step t, so neither the
    bootstrap value nor later advantages cross that boundary. ``last_value``
    bootstraps the step after the final one. Advantages are returned raw.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError(f"length mismatch: rewards {rewards.shape}, values {values.shape}, "
                         f"dones {dones.shape}")
    T = len(rewards)
    adv = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(last_value, dtype=np.float64), rewards.shape[1:])
    next_adv = np.zeros(rewards.shape[1:])
    for t in reversed(range(T)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-8 else 1.0)


def ppo_loss(new_log_prob: torch.Tensor, old_log_prob: torch.Tensor, advantages: torch.Tensor,
             values: torch.Tensor, returns: torch.Tensor, entropy: torch.Tensor,
             clip_eps: float, value_coeff: float = 0.5, entropy_coeff: float = 0.0) -> LossBreakdown:
    """Clipped surrogate + value MSE - entropy bonus."""
    ratio = torch.exp(new_log_prob - old_log_prob)
    if not torch.isfinite(ratio).all():
        raise FloatingPointError("non-finite PPO probability ratio")
    unclipped = ratio * advantages
    clipped = ratio.clamp(1 - clip_eps, 1 + clip_eps) * advantages
    surrogate = -torch.min(unclipped, clipped).mean()
    value = F.mse_loss(values, returns)
    ent = entropy.mean()
    total = surrogate + value_coeff * value - entropy_coeff * ent
    clip_frac = ((ratio - 1).abs() > clip_eps).float().mean()
    return LossBreakdown(total, {"surrogate": surrogate, "value": value, "entropy": ent,
                                 "clip_frac": clip_frac})


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, N, H, W, C) uint8
    actions: np.ndarray  # (T, N)
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray  # GAIL rewards, filled after collection
    dones: np.ndarray
    last_value: np.ndarray
    episode_returns: list
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


def ppo_update(policy: Policy, optimizer: torch.optim.Optimizer, buffer: RolloutBuffer,
               config: GAILConfig, rng: np.random.Generator, lr: Optional[float] = None) -> dict:
    """Epochs of minibatch PPO on one round of rollouts; returns mean loss statistics."""
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    obs = buffer.flat("obs")
    actions = torch.as_tensor(buffer.flat("actions"))
    old_log_probs = torch.as_tensor(buffer.flat("log_probs"), dtype=torch.float32)
    advantages = torch.as_tensor(normalize_advantages(buffer.flat("advantages")), dtype=torch.float32)
    returns = torch.as_tensor(buffer.flat("returns"), dtype=torch.float32)
    M = len(obs)
    sums: dict = {}
    n = 0
    for _ in range(config.epochs_per_round):
        order = rng.permutation(M)
        for start in range(0, M, config.minibatch_size):
            rows = order[start:start + config.minibatch_size]
            dist, values = policy.dist_and_value(obs_to_tensor(obs[rows]))
            out = ppo_loss(dist.log_prob(actions[rows]), old_log_probs[rows], advantages[rows],
                           values, returns[rows], dist.entropy(), config.clip_eps,
                           config.value_coeff, config.entropy_coeff)
            optimizer.zero_grad(set_to_none=True)
            out.total.backward()
            nn.utils.clip_grad_norm_(policy.parameters(), config.max_grad_norm)
            optimizer.step()
            for k, v in out.scalars().items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
    return {k: v / max(n, 1) for k, v in sums.items()}


@torch.no_grad()
def collect_rollouts(policy: Policy, pool, n_steps: int, obs: np.ndarray,
                     generator: torch.Generator):
    """Step the pool for ``n_steps``; transitions are stored in env-index order.

    Returns ``(buffer, next_obs)``; the buffer's ``rewards`` are left at zero.
    """
    N = pool.n_envs
    obs_buf = np.zeros((n_steps,) + obs.shape, dtype=np.uint8)
    act_buf = np.zeros((n_steps, N), dtype=np.int64)
    logp_buf = np.zeros((n_steps, N), dtype=np.float32)
    val_buf = np.zeros((n_steps, N), dtype=np.float32)
    done_buf = np.zeros((n_steps, N), dtype=bool)
    episode_returns = []
    for t in range(n_steps):
        dist, values = policy.dist_and_value(obs_to_tensor(obs))
        actions = sample_actions(dist, generator)
        obs_buf[t] = obs
        act_buf[t] = actions.numpy()
        logp_buf[t] = dist.log_prob(actions).numpy()
        val_buf[t] = values.numpy()
        obs, _, dones, infos = pool.step(act_buf[t])
        done_buf[t] = dones
        episode_returns += [info["episode_return"] for info in infos if info]
    last_value = policy.value(obs_to_tensor(obs)).numpy()
    buffer = RolloutBuffer(obs_buf, act_buf, logp_buf, val_buf, np.zeros((n_steps, N), np.float32),
                           done_buf, last_value, episode_returns)
    return buffer, obs


def expert_arrays(dataset: TrajectoryDataset):
    obs, actions, _, _ = stacked_observations(dataset)
    return obs, np.asarray(actions)


def train_gail(policy: Policy, disc: Discriminator, pool, expert: TrajectoryDataset,
               config: GAILConfig, rng: np.random.Generator, callbacks: Sequence[Callable] = ()):
    """Alternating rounds of rollout collection, PPO on the GAIL reward and discriminator steps.

    Returns ``(policy, history)``; each history row has ``round``,
    ``policy_loss``, ``disc_loss``, ``disc_acc``, ``mean_return`` and
    ``env_steps``. ``mean_return`` is the mean true environment return of the
    episodes that finished during the round (NaN if none did).
    """
    if pool.n_envs != config.n_parallel_envs:
        raise ValueError(f"pool has {pool.n_envs} envs, config expects {config.n_parallel_envs}")
    if policy.action_space != expert.action_space:
        raise ValueError("policy and expert action spaces differ")
    history = []
    n_rounds = config.n_rounds
    if n_rounds == 0:
        return policy, history
    e_obs, e_act = expert_arrays(expert)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.policy_lr)
    disc_trainer = DiscriminatorTrainer(disc, config.disc_lr, config.disc_batch_size,
                                        config.disc_augmentation, rng)
    normalizer = RewardNormalizer(config.reward_norm_std, config.reward_norm_decay)
    generator = torch.Generator().manual_seed(int(rng.integers(2**63)))
    obs = pool.reset()
    env_steps = 0
    for rnd in range(n_rounds):
        buffer, obs = collect_rollouts(policy, pool, config.steps_per_round, obs, generator)
        env_steps += config.steps_per_round_total
        flat_obs, flat_act = buffer.flat("obs"), buffer.flat("actions")
        raw = []
        with torch.no_grad():
            for i in range(0, len(flat_obs), 512):
                raw.append(gail_raw_reward(
                    -disc(obs_to_tensor(flat_obs[i:i + 512]), torch.as_tensor(flat_act[i:i + 512])),
                    config.reward_form).numpy())
        raw = np.concatenate(raw)
        normalizer.update(raw)
        buffer.rewards = normalizer.normalize(raw).reshape(buffer.actions.shape).astype(np.float32)
        buffer.advantages = gae_advantages(buffer.rewards, buffer.values, buffer.dones,
                                           config.gamma, config.gae_lambda, buffer.last_value)
        buffer.returns = buffer.advantages + buffer.values
        lr = config.policy_lr * (1.0 - rnd / n_rounds)
        stats = ppo_update(policy, optimizer, buffer, config, rng, lr)
        if not math.isfinite(stats.get("total", float("nan"))):
            raise FloatingPointError(f"non-finite PPO loss in round {rnd}: {stats}")
        disc_losses, disc_accs = [], []
        for _ in range(config.disc_steps_per_round):
            out = disc_trainer.step(e_obs, e_act, flat_obs, flat_act)
            disc_losses.append(float(out.total.detach()))
            disc_accs.append(float(out.components["accuracy"]))
        record = {"round": rnd, "policy_loss": stats["total"],
                  "disc_loss": float(np.mean(disc_losses)) if disc_losses else float("nan"),
                  "disc_acc": float(np.mean(disc_accs)) if disc_accs else float("nan"),
                  "mean_return": (float(np.mean(buffer.episode_returns))
                                  if buffer.episode_returns else float("nan")),
                  "env_steps": env_steps}
        history.append(record)
        for cb in callbacks:
            cb(rnd, record, policy, disc)
    return policy, history
