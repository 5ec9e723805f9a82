"""The two integration regimes (pretrain then fine-tune, joint training) and the control run.

Initialisation is arranged so the regimes can be compared exactly:

* the encoder is always built right after ``torch.manual_seed(seed)``, so a
  control encoder, a RepL encoder before training and the mean path of a
  Gaussian RepL encoder start from the same weights;
* policy and discriminator heads are built after a second, derived seed, so
  whatever decoders a RepL algorithm creates do not shift them;
* each stochastic stage (RepL batches, IL batches, GAIL rollouts, evaluation)
  draws from its own child of ``numpy.random.SeedSequence(seed)``.
"""
from __future__ import annotations

import copy
import csv
import json
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..bench import GridWorldPool, generate_demonstrations, generate_random_rollouts
from ..dataio import TrajectoryDataset, pair_index, read_dataset
from ..evalstat import evaluate_policy, write_results_csv
from ..imitation import BCBatches, Discriminator, Policy, bc_loss, train_bc, train_gail
from ..models import Encoder, save_checkpoint, save_encoder
from ..repl import LossBreakdown, PairBatches, RepLModel, train_repl, write_loss_history
from .config import ExperimentConfig

FAILURE_MARKER = "FAILED"
STREAMS = ("repl", "il", "gail_env", "eval")


@dataclass
class RunArtifacts:
    run_dir: Path
    results: list = field(default_factory=list)
    repl_history: list = field(default_factory=list)
    il_history: list = field(default_factory=list)
    policy: Optional[Policy] = None
    encoder: Optional[Encoder] = None

    @property
    def files(self) -> list:
        return sorted(p.name for p in self.run_dir.iterdir())


def stage_rngs(seed: int) -> dict:
    return {name: np.random.default_rng(s)
            for name, s in zip(STREAMS, np.random.SeedSequence(seed).spawn(len(STREAMS)))}


def head_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])


def load_data(config: ExperimentConfig):
    """Returns ``(demos, repl_data)``; RepL may see extra non-demonstration rollouts."""
    task, data = config.task, config.data
    if data.demos_path:
        demos = read_dataset(data.demos_path)
    else:
        demos = generate_demonstrations(task, data.n_demos, task.train_layouts,
                                        rng=np.random.default_rng(data.demo_seed))
    repl_data = demos
    if data.extra_path:
        repl_data = repl_data.concat(read_dataset(data.extra_path))
    if data.extra_random_rollouts:
        extra = generate_random_rollouts(task, data.extra_random_rollouts, task.train_layouts,
                                         rng=np.random.default_rng([data.demo_seed, 1]),
                                         first_id=len(repl_data))
        repl_data = repl_data.concat(extra)
    return demos, repl_data


def _obs_shape(dataset: TrajectoryDataset) -> tuple:
    return dataset.obs_shape[:-1] + (dataset.obs_shape[-1] * dataset.frame_stack,)


def build_policy(encoder: Encoder, dataset: TrajectoryDataset, seed: int) -> Policy:
    torch.manual_seed(head_seed(seed))
    return Policy(_obs_shape(dataset), dataset.action_space, encoder=encoder,
                  repr_dim=encoder.repr_dim)


def build_discriminator(encoder: Encoder, dataset: TrajectoryDataset, seed: int) -> Discriminator:
    torch.manual_seed(head_seed(seed) + 1)
    return Discriminator(_obs_shape(dataset), dataset.action_space, encoder=encoder,
                         repr_dim=encoder.repr_dim)


def control_encoder(dataset: TrajectoryDataset, seed: int) -> Encoder:
    torch.manual_seed(seed)
    return Encoder(_obs_shape(dataset))


# ---------------------------------------------------------------------------- joint


def joint_step_loss(policy: Policy, model: RepLModel, bc_obs, bc_actions, repl_batch,
                    bc_config, aux_weight: float, step: int,
                    generator: Optional[torch.Generator] = None) -> LossBreakdown:
    """total = bc + aux_weight * repl on one shared encoder."""
    bc = bc_loss(policy, bc_obs, bc_actions, bc_config)
    context, target, actions = repl_batch
    repl = model.compute_loss(context, target, actions, step, generator)
    total = bc.total + aux_weight * repl.total
    comps = {"bc": bc.total, "repl": repl.total, **bc.components}
    comps.update({f"repl_{k}": v for k, v in repl.components.items()})
    return LossBreakdown(total, comps)


def train_joint(policy: Policy, model: RepLModel, demos: TrajectoryDataset,
                repl_data: TrajectoryDataset, bc_config, aux_weight: float,
                bc_rng: np.random.Generator, repl_rng: np.random.Generator,
                callbacks: Sequence[Callable] = (), mode: str = "sum"):
    """One Adam (the BC learning rate) over policy and RepL parameters; returns ``(policy, history)``.

    ``mode="sum"`` takes one step on the summed loss. ``mode="alternate"``
    takes a BC step and then a RepL step (scaled by ``aux_weight``) per
    iteration; history rows look the same either way.
    """
    if mode not in ("sum", "alternate"):
        raise ValueError(f"unknown joint mode {mode!r}")
    if policy.encoder is not model.encoder:
        raise ValueError("joint training needs the policy and RepL model to share one encoder")
    if demos.action_space != repl_data.action_space or _obs_shape(demos) != _obs_shape(repl_data):
        raise ValueError("BC and RepL datasets have incompatible observations or actions")
    history = []
    if bc_config.training_batches == 0:
        return policy, history
    bc_batches = BCBatches(demos, bc_config.batch_size, bc_config.augmentation, bc_rng)
    repl_batches = PairBatches(model.spec, pair_index(repl_data, model.spec.pair_offset), repl_rng)
    params, seen = [], set()
    for p in list(policy.bc_parameters()) + list(model.parameters()):
        if p.requires_grad and id(p) not in seen:
            seen.add(id(p))
            params.append(p)
    optimizer = torch.optim.Adam(params, lr=bc_config.learning_rate)
    generator = torch.Generator().manual_seed(int(repl_rng.integers(2**63)))
    policy.train()
    model.train()
    for step in range(bc_config.training_batches):
        obs, actions = bc_batches.next()
        if mode == "sum":
            out = joint_step_loss(policy, model, obs, actions, repl_batches.next(), bc_config,
                                  aux_weight, step, generator)
            _check_and_step(optimizer, out.total, step, out)
        else:
            bc = bc_loss(policy, obs, actions, bc_config)
            _check_and_step(optimizer, bc.total, step, bc)
            context, target, repl_actions = repl_batches.next()
            repl = model.compute_loss(context, target, repl_actions, step, generator)
            _check_and_step(optimizer, aux_weight * repl.total, step, repl)
            comps = {"bc": bc.total, "repl": repl.total, **bc.components}
            comps.update({f"repl_{k}": v for k, v in repl.components.items()})
            out = LossBreakdown(bc.total.detach() + aux_weight * repl.total.detach(), comps)
        model.after_step()
        record = {"step": step, **out.scalars()}
        history.append(record)
        for cb in callbacks:
            cb(step, record, policy)
    return policy, history


def _check_and_step(optimizer, loss: torch.Tensor, step: int, out: LossBreakdown) -> None:
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite joint loss at step {step}: {out.scalars()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()


# ---------------------------------------------------------------------------- runs


def _write_rows(path: Path, rows: list, first=("step", "total")) -> None:
    keys = [k for k in first if any(k in r for r in rows)]
    for r in rows:
        keys += [k for k in r if k not in keys]
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def _evaluate(config: ExperimentConfig, policy: Policy, rng: np.random.Generator) -> list:
    records = []
    for split in config.eval.splits:
        task = config.task_name if split == "train" else f"{config.task_name}-test"
        rec = evaluate_policy(policy, config.task, config.task.layout_range(split),
                              n_episodes=config.eval.n_episodes, rng=rng, task=task,
                              algorithm=config.name, seed=config.seed)
        records.append(rec)
    return records


def _run_il(config: ExperimentConfig, encoder: Encoder, demos, rngs, art: RunArtifacts,
            disc_encoder: Optional[Encoder] = None) -> Policy:
    policy = build_policy(encoder, demos, config.seed)
    if config.il == "bc":
        policy, art.il_history = train_bc(policy, demos, config.bc, rngs["il"])
        _write_rows(art.run_dir / "bc_metrics.csv", art.il_history)
        return policy
    if disc_encoder is None:
        torch.manual_seed(head_seed(config.seed) + 2)
        disc_encoder = Encoder(_obs_shape(demos))
    disc = build_discriminator(disc_encoder, demos, config.seed)
    pool = GridWorldPool(config.task, config.gail.n_parallel_envs, config.task.train_layouts,
                         rng=rngs["gail_env"])
    policy, art.il_history = train_gail(policy, disc, pool, demos, config.gail, rngs["il"])
    _write_rows(art.run_dir / "gail_metrics.csv", art.il_history, first=("round",))
    save_checkpoint(art.run_dir / "discriminator.ckpt",
                    {"encoder": disc.encoder, "head": disc.head})
    return policy


def _finish(config: ExperimentConfig, policy: Policy, rngs, art: RunArtifacts) -> RunArtifacts:
    art.policy = policy
    groups = {"encoder": policy.encoder, "head": policy.head, "value_head": policy.value_head}
    if policy.log_std is not None:
        groups["log_std"] = {"log_std": policy.log_std}
    save_checkpoint(art.run_dir / "policy.ckpt", groups, {"encoder": policy.encoder.config()})
    art.results = _evaluate(config, policy, rngs["eval"])
    write_results_csv(art.run_dir / "results.csv", art.results)
    return art


def _prepare(config: ExperimentConfig) -> RunArtifacts:
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / FAILURE_MARKER).unlink(missing_ok=True)
    config.save(run_dir / "config.toml")
    return RunArtifacts(run_dir)


def run_pretrain_pipeline(config: ExperimentConfig) -> RunArtifacts:
    """RepL pretraining, then the IL trainer starting from the pretrained encoder."""
    if config.regime != "pretrain":
        raise ValueError(f"expected a pretrain config, got regime {config.regime!r}")
    art = _prepare(config)
    rngs = stage_rngs(config.seed)
    demos, repl_data = load_data(config)
    encoder, art.repl_history = train_repl(config.repl, repl_data, rngs["repl"], seed=config.seed)
    write_loss_history(art.run_dir / "repl_loss.csv", art.repl_history)
    save_encoder(art.run_dir / "encoder.ckpt", encoder, {"algorithm": config.repl.name})
    art.encoder = encoder
    disc_encoder = copy.deepcopy(encoder) if config.il == "gail" else None
    policy = _run_il(config, encoder, demos, rngs, art, disc_encoder)
    return _finish(config, policy, rngs, art)


def run_joint_pipeline(config: ExperimentConfig) -> RunArtifacts:
    """BC with the RepL objective as a weighted auxiliary loss on the shared encoder."""
    if config.regime != "joint":
        raise ValueError(f"expected a joint config, got regime {config.regime!r}")
    art = _prepare(config)
    rngs = stage_rngs(config.seed)
    demos, repl_data = load_data(config)
    # CEB's rho schedule and similar step-indexed terms follow the joint step count
    spec = replace(config.repl, training_batches=config.bc.training_batches)
    torch.manual_seed(config.seed)
    model = RepLModel(spec, _obs_shape(repl_data), repl_data.action_space)
    policy = build_policy(model.encoder, demos, config.seed)
    policy, history = train_joint(policy, model, demos, repl_data, config.bc, config.aux_weight,
                                  rngs["il"], rngs["repl"], mode=config.joint_mode)
    art.il_history = history
    _write_rows(art.run_dir / "bc_metrics.csv", history)
    art.repl_history = [{"step": r["step"], "total": r["repl"],
                         **{k[5:]: v for k, v in r.items() if k.startswith("repl_")}}
                        for r in history]
    write_loss_history(art.run_dir / "repl_loss.csv", art.repl_history)
    art.encoder = model.transfer_encoder()
    save_encoder(art.run_dir / "encoder.ckpt", art.encoder, {"algorithm": spec.name})
    return _finish(config, policy, rngs, art)


def run_control_pipeline(config: ExperimentConfig) -> RunArtifacts:
    """IL from a freshly initialised encoder, no RepL."""
    if config.regime != "control":
        raise ValueError(f"expected a control config, got regime {config.regime!r}")
    art = _prepare(config)
    rngs = stage_rngs(config.seed)
    demos, _ = load_data(config)
    encoder = control_encoder(demos, config.seed)
    policy = _run_il(config, encoder, demos, rngs, art)
    return _finish(config, policy, rngs, art)


PIPELINES = {"pretrain": run_pretrain_pipeline, "joint": run_joint_pipeline,
             "control": run_control_pipeline}


def run_experiment(config: ExperimentConfig) -> RunArtifacts:
    """Dispatch on the regime; on failure leave partial outputs plus a ``FAILED`` marker."""
    try:
        return PIPELINES[config.regime](config)
    except Exception as exc:
        run_dir = config.run_dir
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / FAILURE_MARKER).write_text(json.dumps({
            "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}, indent=1))
        raise
