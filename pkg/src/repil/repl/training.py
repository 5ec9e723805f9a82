"""Composing a RepL network from an algorithm spec, and the pretraining loop."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..augment import augment_pair_batch
from ..dataio import ActionSpace, PairIndex, TrajectoryDataset, pair_index
from ..models import (
    ActionFusion, Encoder, ImageDecoder, InverseActionHead, MomentumEncoder, ProjectionHead,
    momentum_update, obs_to_tensor, sample_latent)
from .algorithms import RepLAlgorithmSpec
from .losses import (
    LossBreakdown, SimilarityFunction, ceb_contrastive_term, ceb_gamma, ceb_loss, dynamics_loss,
    info_nce_loss, inverse_dynamics_loss, vae_loss)


class _EncodeProject(nn.Module):
    """Encoder followed by a projection head; the unit tracked by a momentum copy."""

    def __init__(self, encoder: Encoder, projection: ProjectionHead):
        super().__init__()
        self.encoder = encoder
        self.projection = projection

    def forward(self, x, side="context"):
        return self.projection(self.encoder(x), side)


class RepLModel(nn.Module):
    """Encoder plus whatever decoders the algorithm needs.

    The encoder is created first so its initialisation only depends on the
    torch seed, not on which decoders follow.
    """

    def __init__(self, spec: RepLAlgorithmSpec, obs_shape, action_space: ActionSpace,
                 encoder: Optional[Encoder] = None):
        super().__init__()
        self.spec = spec
        self.action_space = action_space
        self.encoder = encoder if encoder is not None else Encoder(
            obs_shape, spec.repr_dim, gaussian=spec.gaussian_encoder)
        d = spec.repr_dim
        self.projection = ProjectionHead(spec.projection, d)
        proj_dim = d if spec.projection.mode == "none" else spec.projection.output_dim
        self.similarity = SimilarityFunction(spec.similarity, spec.temperature, proj_dim)
        self.momentum = None
        if spec.momentum is not None:
            self.momentum = MomentumEncoder(_EncodeProject(self.encoder, self.projection),
                                            spec.momentum)
            self.register_buffer("queue", torch.zeros(0, proj_dim))
        self.image_decoder = ImageDecoder(obs_shape, d) if spec.loss in ("vae", "dynamics_mse") else None
        self.fusion = ActionFusion(action_space, d) if spec.loss == "dynamics_mse" else None
        self.inverse_head = (InverseActionHead(action_space, d)
                             if spec.loss == "inverse_dynamics_nll" else None)

    def decoder_modules(self) -> dict:
        mods = {"projection": self.projection, "similarity": self.similarity}
        for name in ("image_decoder", "fusion", "inverse_head"):
            if getattr(self, name) is not None:
                mods[name] = getattr(self, name)
        return mods

    def transfer_encoder(self) -> Encoder:
        return self.encoder.deterministic()

    def compute_loss(self, context: torch.Tensor, target, actions, step: int = 0,
                     generator: Optional[torch.Generator] = None) -> LossBreakdown:
        spec = self.spec
        if spec.loss == "info_nce":
            q = self.projection(self.encoder(context), "context")
            if self.momentum is None:
                k = self.projection(self.encoder(target), "target")
                return info_nce_loss(q, k, self.similarity)
            with torch.no_grad():
                k = self.momentum.target(target, "target")
            out = info_nce_loss(q, k, self.similarity,
                                negatives=self.queue if len(self.queue) else None)
            self._enqueue(k)
            return out
        if spec.loss == "ceb":
            ctx_dist = self.encoder(context)
            tgt_dist = self.encoder(target)
            z = sample_latent(*ctx_dist, generator)
            contrastive = ceb_contrastive_term(z, *tgt_dist)
            gamma = spec.ceb_gamma if spec.ceb_gamma is not None else ceb_gamma(self.ceb_rho(step))
            return ceb_loss(z, ctx_dist, tgt_dist, contrastive, gamma=gamma)
        if spec.loss == "vae":
            mean, logvar = self.encoder(context)
            recon = self.image_decoder(sample_latent(mean, logvar, generator))
            return vae_loss(recon, target, mean, logvar, spec.beta)
        if spec.loss == "dynamics_mse":
            z = self.encoder(context)
            return dynamics_loss(self.image_decoder(self.fusion(z, actions)), target)
        # inverse dynamics: context (o_t, o_t+1) -> a_t
        logits = self.inverse_head(self.encoder(context), self.encoder(target))
        return inverse_dynamics_loss(logits, actions, self.action_space)

    def ceb_rho(self, step: int) -> float:
        n = max(1, self.spec.training_batches - 1)
        frac = min(1.0, step / n)
        return self.spec.ceb_rho_start + frac * (self.spec.ceb_rho_end - self.spec.ceb_rho_start)

    @torch.no_grad()
    def _enqueue(self, keys: torch.Tensor) -> None:
        self.queue = torch.cat([keys.detach(), self.queue])[: self.spec.queue_size]

    def after_step(self) -> None:
        if self.momentum is not None:
            momentum_update(self.momentum)


class BatchSampler:
    """Index batches drawn from successive random permutations of ``range(n)``."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample batches from an empty pair set")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._buffer = np.zeros(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._buffer) < self.batch_size:
            self._buffer = np.concatenate([self._buffer, self.rng.permutation(self.n)])
        out, self._buffer = self._buffer[: self.batch_size], self._buffer[self.batch_size:]
        return out


class PairBatches:
    """Turns a :class:`PairIndex` into augmented (context, target, action) tensor batches."""

    def __init__(self, spec: RepLAlgorithmSpec, index: PairIndex, rng: np.random.Generator):
        if len(index) == 0:
            raise ValueError(
                f"dataset yields no pairs for {spec.name} (temporal offset {spec.pair_offset})")
        self.spec, self.index, self.rng = spec, index, rng
        self.sampler = BatchSampler(len(index), spec.batch_size, rng)

    def next(self):
        rows = self.sampler.next()
        ctx_rows, tgt_rows = self.index.context[rows], self.index.target[rows]
        context = obs_to_tensor(self.index.obs[ctx_rows])
        target = obs_to_tensor(self.index.obs[tgt_rows])
        actions = torch.as_tensor(np.asarray(self.index.actions[ctx_rows]))
        context, target = augment_pair_batch(self.spec.augmentation, context, target, self.rng)
        return context, target, actions


def train_repl(spec: RepLAlgorithmSpec, dataset: TrajectoryDataset, rng: np.random.Generator,
               callbacks: Sequence[Callable] = (), seed: int = 0,
               model: Optional[RepLModel] = None):
    """Pretrain an encoder; returns ``(transfer_encoder, loss_history)``.

    ``seed`` fixes parameter initialisation; ``rng`` drives batch order,
    augmentation and latent sampling. Each history entry is a dict with
    ``step``, ``total`` and the loss components.
    """
    obs_shape = dataset.obs_shape[:-1] + (dataset.obs_shape[-1] * dataset.frame_stack,)
    if model is None:
        torch.manual_seed(seed)
        model = RepLModel(spec, obs_shape, dataset.action_space)
    history = []
    if spec.training_batches == 0:
        return model.transfer_encoder(), history
    batches = PairBatches(spec, pair_index(dataset, spec.pair_offset), rng)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=spec.learning_rate)
    generator = torch.Generator().manual_seed(int(rng.integers(2**63)))
    model.train()
    for step in range(spec.training_batches):
        context, target, actions = batches.next()
        out = model.compute_loss(context, target, actions, step, generator)
        if not torch.isfinite(out.total):
            raise FloatingPointError(
                f"{spec.name}: non-finite loss at step {step}: {out.scalars()}")
        optimizer.zero_grad(set_to_none=True)
        out.total.backward()
        optimizer.step()
        model.after_step()
        record = {"step": step, **out.scalars()}
        history.append(record)
        for cb in callbacks:
            cb(step, record, model)
    return model.transfer_encoder(), history


def write_loss_history(path, history: list) -> None:
    """CSV with header ``step,total,<component...>``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = ["step", "total"]
    for rec in history:
        keys += [k for k in rec if k not in keys]
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)
