"""Trajectory datasets: on-disk format, frame stacking and context/target pairs.

A dataset directory holds ``manifest.json`` and ``trajectories.bin``. The
binary is a sequence of trajectory records, each laid out little-endian as::

    u32 T
    T observation payloads   (H*W*C uint8, row-major, channel-last)
    T actions                (u16 for discrete spaces, f32*dim for continuous)
    T rewards                (f32)

Pair streams are generated in trajectory-major, time-major order; shuffling is
left to the training loops.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BINARY_NAME = "trajectories.bin"


class DatasetFormatError(ValueError):
    """Raised when a dataset on disk is malformed, truncated or of unknown version."""


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" | "continuous"
    size: int  # number of actions, or action vector dimension

    def __post_init__(self):
        if self.kind not in ("discrete", "continuous"):
            raise ValueError(f"unknown action space kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("action space size must be positive")
        if self.kind == "discrete" and self.size > 0xFFFF:
            raise ValueError("discrete action spaces are stored as u16")

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"

    def to_json(self) -> dict:
        return {"kind": self.kind, "size": self.size}

    @classmethod
    def from_json(cls, d: dict) -> "ActionSpace":
        return cls(d["kind"], int(d["size"]))


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, H, W, C) uint8
    actions: np.ndarray  # (T,) int64 or (T, dim) float32
    rewards: np.ndarray  # (T,) float32
    trajectory_id: int

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.uint8)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        if self.observations.ndim != 4:
            raise ValueError("observations must have shape (T, H, W, C)")
        T = len(self.observations)
        if T < 1:
            raise ValueError("a trajectory needs at least one step")
        if len(self.actions) != T or len(self.rewards) != T:
            raise ValueError(
                f"length mismatch: {T} observations, {len(self.actions)} actions, "
                f"{len(self.rewards)} rewards")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def obs_shape(self) -> tuple:
        return tuple(self.observations.shape[1:])


@dataclass
class TrajectoryDataset:
    trajectories: list
    obs_shape: tuple
    action_space: ActionSpace
    frame_stack: int = 3

    def __post_init__(self):
        self.obs_shape = tuple(int(s) for s in self.obs_shape)
        if self.frame_stack < 1:
            raise ValueError("frame_stack must be positive")
        self.validate()

    def validate(self) -> None:
        ids = [t.trajectory_id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise ValueError("trajectory ids must be unique")
        for traj in self.trajectories:
            if traj.obs_shape != self.obs_shape:
                raise ValueError(
                    f"trajectory {traj.trajectory_id} has observation shape "
                    f"{traj.obs_shape}, dataset expects {self.obs_shape}")
            _check_actions(traj.actions, self.action_space, traj.trajectory_id)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        if (self.obs_shape, self.action_space, self.frame_stack, len(self)) != (
                other.obs_shape, other.action_space, other.frame_stack, len(other)):
            return False
        for a, b in zip(self.trajectories, other.trajectories):
            if a.trajectory_id != b.trajectory_id:
                return False
            if not (np.array_equal(a.observations, b.observations)
                    and np.array_equal(a.actions, b.actions)
                    and np.array_equal(a.rewards, b.rewards)):
                return False
        return True

    def concat(self, other: "TrajectoryDataset") -> "TrajectoryDataset":
        """Union of two compatible datasets (e.g. demos plus extra random rollouts)."""
        if (self.obs_shape, self.action_space) != (other.obs_shape, other.action_space):
            raise ValueError("datasets have different observation or action spaces")
        return TrajectoryDataset(self.trajectories + other.trajectories, self.obs_shape,
                                 self.action_space, self.frame_stack)


def _check_actions(actions, space: ActionSpace, traj_id) -> None:
    actions = np.asarray(actions)
    if space.discrete:
        if actions.ndim != 1:
            raise ValueError(f"trajectory {traj_id}: discrete actions must be 1-d")
        if actions.size and (actions.min() < 0 or actions.max() >= space.size):
            raise ValueError(f"trajectory {traj_id}: action outside discrete({space.size})")
    else:
        if actions.ndim != 2 or actions.shape[1] != space.size:
            raise ValueError(
                f"trajectory {traj_id}: continuous actions must have shape (T, {space.size})")


def _action_dtype(space: ActionSpace) -> np.dtype:
    return np.dtype("<u2") if space.discrete else np.dtype("<f4")


def _encode_trajectory(traj: Trajectory, space: ActionSpace) -> bytes:
    T = len(traj)
    parts = [struct.pack("<I", T), np.ascontiguousarray(traj.observations).tobytes()]
    parts.append(np.asarray(traj.actions).astype(_action_dtype(space)).tobytes())
    parts.append(np.asarray(traj.rewards).astype("<f4").tobytes())
    return b"".join(parts)


def write_dataset(dataset: TrajectoryDataset, path) -> None:
    """Serialise ``dataset`` into the directory ``path`` (created if needed)."""
    # all shape/action checks happen before anything touches the disk
    dataset.validate()
    blob = b"".join(_encode_trajectory(t, dataset.action_space) for t in dataset.trajectories)
    manifest = {
        "version": FORMAT_VERSION,
        "obs_shape": list(dataset.obs_shape),
        "action_space": dataset.action_space.to_json(),
        "frame_stack": dataset.frame_stack,
        "n_trajectories": len(dataset),
        "n_steps": dataset.n_steps,
        "trajectory_ids": [int(t.trajectory_id) for t in dataset.trajectories],
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"dataset directory {path} is not writable")
    (path / BINARY_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))


def read_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
        blob = (path / BINARY_NAME).read_bytes()
    except FileNotFoundError as e:
        raise DatasetFormatError(f"incomplete dataset directory {path}: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset version {manifest.get('version')!r} (expected {FORMAT_VERSION})")
    digest = manifest.get("sha256")
    if digest is not None and hashlib.sha256(blob).hexdigest() != digest:
        raise DatasetFormatError("trajectories.bin checksum mismatch (truncated or corrupted)")

    obs_shape = tuple(int(s) for s in manifest["obs_shape"])
    space = ActionSpace.from_json(manifest["action_space"])
    n_traj = int(manifest["n_trajectories"])
    ids = manifest.get("trajectory_ids", list(range(n_traj)))
    frame_bytes = int(np.prod(obs_shape))
    act_dtype = _action_dtype(space)
    act_width = 1 if space.discrete else space.size

    trajectories = []
    offset = 0

    def take(n):
        nonlocal offset
        if offset + n > len(blob):
            raise DatasetFormatError(
                f"trajectories.bin is truncated: needed {offset + n} bytes, have {len(blob)}")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    for i in range(n_traj):
        (T,) = struct.unpack("<I", take(4))
        obs = np.frombuffer(take(T * frame_bytes), dtype=np.uint8).reshape((T,) + obs_shape)
        acts = np.frombuffer(take(T * act_width * act_dtype.itemsize), dtype=act_dtype)
        if space.discrete:
            acts = acts.astype(np.int64)
        else:
            acts = acts.astype(np.float32).reshape(T, act_width)
        rews = np.frombuffer(take(T * 4), dtype="<f4").astype(np.float32)
        trajectories.append(Trajectory(obs.copy(), acts, rews, int(ids[i])))
    if offset != len(blob):
        raise DatasetFormatError(f"{len(blob) - offset} trailing bytes in trajectories.bin")
    if sum(len(t) for t in trajectories) != int(manifest["n_steps"]):
        raise DatasetFormatError("n_steps in manifest does not match binary contents")
    return TrajectoryDataset(trajectories, obs_shape, space, int(manifest["frame_stack"]))


def frame_stack(traj: Trajectory, n: int) -> np.ndarray:
    """Stack the ``n`` most recent frames along channels, oldest first.

    Steps before the start of the episode repeat frame 0, so the output has one
    stacked observation per step with ``n * C`` channels.
    """
    if n < 1:
        raise ValueError("frame stack size must be >= 1")
    obs = traj.observations if isinstance(traj, Trajectory) else np.asarray(traj)
    T = len(obs)
    idx = np.arange(T)[:, None] + np.arange(-n + 1, 1)[None, :]
    idx = np.clip(idx, 0, None)
    stacked = obs[idx]  # (T, n, H, W, C)
    return np.concatenate([stacked[:, j] for j in range(n)], axis=-1)


@dataclass
class ContextTargetPair:
    context: np.ndarray
    target: np.ndarray
    extra_context: Optional[np.ndarray] = None
    offset: int = 0
    # (trajectory_id, time index) of the frames the pair was cut from
    context_source: tuple = field(default=(0, 0))
    target_source: tuple = field(default=(0, 0))


@dataclass
class PairIndex:
    """Flat, array-backed view of a pair stream used by the batched trainers.

    ``obs`` holds every frame-stacked observation of the dataset; ``context`` and
    ``target`` index into it. ``actions`` holds a_t for each context row.
    """
    obs: np.ndarray  # (N, H, W, n*C) uint8
    actions: np.ndarray  # (N,) or (N, dim)
    traj_ids: np.ndarray  # (N,)
    steps: np.ndarray  # (N,)
    context: np.ndarray  # (P,)
    target: np.ndarray  # (P,)
    offset: int

    def __len__(self) -> int:
        return len(self.context)


def stacked_observations(dataset: TrajectoryDataset):
    """Frame-stacked observations for every step, plus per-row bookkeeping."""
    if not dataset.trajectories:
        c = dataset.obs_shape[-1] * dataset.frame_stack
        act_shape = (0,) if dataset.action_space.discrete else (0, dataset.action_space.size)
        return (np.zeros((0,) + dataset.obs_shape[:-1] + (c,), np.uint8),
                np.zeros(act_shape), np.zeros(0, np.int64), np.zeros(0, np.int64))
    obs = np.concatenate([frame_stack(t, dataset.frame_stack) for t in dataset.trajectories])
    actions = np.concatenate([np.asarray(t.actions) for t in dataset.trajectories])
    traj_ids = np.concatenate([np.full(len(t), t.trajectory_id) for t in dataset.trajectories])
    steps = np.concatenate([np.arange(len(t)) for t in dataset.trajectories])
    return obs, actions, traj_ids, steps


def pair_index(dataset: TrajectoryDataset, k: int = 0) -> PairIndex:
    if k < 0:
        raise ValueError("temporal offset must be non-negative")
    obs, actions, traj_ids, steps = stacked_observations(dataset)
    ctx, tgt = [], []
    start = 0
    for traj in dataset.trajectories:
        T = len(traj)
        n = max(0, T - k)
        ctx.append(start + np.arange(n))
        tgt.append(start + k + np.arange(n))
        start += T
    ctx = np.concatenate(ctx) if ctx else np.zeros(0, np.int64)
    tgt = np.concatenate(tgt) if tgt else np.zeros(0, np.int64)
    return PairIndex(obs, actions, traj_ids, steps, ctx.astype(np.int64), tgt.astype(np.int64), k)


def _pairs_from_index(index: PairIndex, with_action: bool) -> Iterator[ContextTargetPair]:
    for c, t in zip(index.context, index.target):
        yield ContextTargetPair(
            context=index.obs[c],
            target=index.obs[t],
            extra_context=np.asarray(index.actions[c]) if with_action else None,
            offset=index.offset,
            context_source=(int(index.traj_ids[c]), int(index.steps[c])),
            target_source=(int(index.traj_ids[t]), int(index.steps[t])),
        )


def make_identity_pairs(dataset: TrajectoryDataset) -> Iterator[ContextTargetPair]:
    return _pairs_from_index(pair_index(dataset, 0), with_action=False)


def make_temporal_offset_pairs(dataset: TrajectoryDataset, k: int,
                               with_action: bool = False) -> Iterator[ContextTargetPair]:
    return _pairs_from_index(pair_index(dataset, k), with_action=with_action)


def count_pairs(lengths: Sequence[int], k: int) -> int:
    return sum(max(0, T - k) for T in lengths)
