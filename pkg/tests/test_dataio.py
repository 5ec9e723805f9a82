import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repil.dataio import (
    ActionSpace, DatasetFormatError, Trajectory, TrajectoryDataset, count_pairs, frame_stack,
    make_identity_pairs, make_temporal_offset_pairs, read_dataset, write_dataset)

from conftest import random_dataset


def _traj(T, hw=(4, 4), tid=0, n_actions=5):
    obs = np.arange(T * hw[0] * hw[1] * 3, dtype=np.int64).reshape((T,) + hw + (3,)) % 251
    return Trajectory(obs.astype(np.uint8), np.arange(T) % n_actions, np.ones(T), tid)


def test_roundtrip(tmp_path, small_dataset):
    write_dataset(small_dataset, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    assert back == small_dataset
    write_dataset(back, tmp_path / "ds2")
    assert (tmp_path / "ds" / "trajectories.bin").read_bytes() == \
        (tmp_path / "ds2" / "trajectories.bin").read_bytes()


def test_roundtrip_continuous(tmp_path, rng):
    ds = random_dataset(rng, n_traj=2, continuous=True, n_actions=3)
    write_dataset(ds, tmp_path)
    assert read_dataset(tmp_path) == ds


def test_empty_dataset(tmp_path):
    ds = TrajectoryDataset([], (8, 8, 3), ActionSpace("discrete", 5))
    write_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["n_trajectories"] == 0 and manifest["n_steps"] == 0
    assert (tmp_path / "trajectories.bin").read_bytes() == b""
    assert read_dataset(tmp_path) == ds


def test_manifest_keys_and_frame_stack(tmp_path, small_dataset):
    write_dataset(small_dataset, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    for key in ("version", "obs_shape", "action_space", "frame_stack", "n_trajectories", "n_steps"):
        assert key in manifest
    assert read_dataset(tmp_path).frame_stack == 3


def test_byte_layout(tmp_path):
    traj = Trajectory(np.full((2, 1, 1, 3), 7, np.uint8), np.array([1, 4]),
                      np.array([0.5, -1.0]), 0)
    write_dataset(TrajectoryDataset([traj], (1, 1, 3), ActionSpace("discrete", 5)), tmp_path)
    blob = (tmp_path / "trajectories.bin").read_bytes()
    expected = (b"\x02\x00\x00\x00" + bytes([7] * 6) + b"\x01\x00\x04\x00"
                + np.array([0.5, -1.0], "<f4").tobytes())
    assert blob == expected


def test_mixed_shapes_rejected_before_write(tmp_path):
    t1 = _traj(3, hw=(8, 8), tid=0)
    t2 = _traj(3, hw=(9, 9), tid=1)
    ds = TrajectoryDataset([t1], (8, 8, 3), ActionSpace("discrete", 5))
    ds.trajectories.append(t2)
    with pytest.raises(ValueError):
        write_dataset(ds, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_truncated_binary(tmp_path, small_dataset):
    write_dataset(small_dataset, tmp_path)
    blob = (tmp_path / "trajectories.bin").read_bytes()
    (tmp_path / "trajectories.bin").write_bytes(blob[:-5])
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path)
    # without the checksum the length accounting still catches it
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    del manifest["sha256"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_dataset(tmp_path)


def test_version_mismatch(tmp_path, small_dataset):
    write_dataset(small_dataset, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetFormatError, match="version"):
        read_dataset(tmp_path)


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2, 2, 3)), np.zeros(2), np.zeros(3), 0)
    with pytest.raises(ValueError):
        Trajectory(np.zeros((0, 2, 2, 3)), np.zeros(0), np.zeros(0), 0)
    with pytest.raises(ValueError):
        TrajectoryDataset([_traj(2, tid=1), _traj(2, tid=1)], (4, 4, 3), ActionSpace("discrete", 5))


def test_frame_stack_identity():
    traj = _traj(4)
    assert np.array_equal(frame_stack(traj, 1), traj.observations)


def test_frame_stack_padding():
    traj = _traj(3)
    o = traj.observations
    stacked = frame_stack(traj, 3)
    assert stacked.shape == (3, 4, 4, 9)
    # hand-applied repeat-first padding
    assert np.array_equal(stacked[0], np.concatenate([o[0], o[0], o[0]], axis=-1))
    assert np.array_equal(stacked[1], np.concatenate([o[0], o[0], o[1]], axis=-1))
    assert np.array_equal(stacked[2], np.concatenate([o[0], o[1], o[2]], axis=-1))


def test_frame_stack_rejects_zero():
    with pytest.raises(ValueError):
        frame_stack(_traj(2), 0)


def test_identity_pairs():
    ds = TrajectoryDataset([_traj(3, tid=0), _traj(5, tid=1)], (4, 4, 3), ActionSpace("discrete", 5))
    pairs = list(make_identity_pairs(ds))
    assert len(pairs) == 8
    for p in pairs:
        assert p.context.tobytes() == p.target.tobytes()
        assert p.offset == 0


def test_temporal_pairs_small():
    traj = _traj(5)
    ds = TrajectoryDataset([traj], (4, 4, 3), ActionSpace("discrete", 5), frame_stack=1)
    pairs = list(make_temporal_offset_pairs(ds, 2, with_action=True))
    assert [(p.context_source[1], p.target_source[1]) for p in pairs] == [(0, 2), (1, 3), (2, 4)]
    for p, t in zip(pairs, range(3)):
        assert np.array_equal(p.context, traj.observations[t])
        assert np.array_equal(p.target, traj.observations[t + 2])
        assert p.extra_context == traj.actions[t]
    assert list(make_temporal_offset_pairs(ds, 8)) == []
    with pytest.raises(ValueError):
        make_temporal_offset_pairs(ds, -1)


def test_offset_zero_matches_identity(small_dataset):
    a = list(make_identity_pairs(small_dataset))
    b = list(make_temporal_offset_pairs(small_dataset, 0))
    assert len(a) == len(b)
    for p, q in zip(a, b):
        assert np.array_equal(p.context, q.context) and np.array_equal(p.target, q.target)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(0, 10))
def test_pair_boundary_and_count_properties(seed, k):
    ds = random_dataset(np.random.default_rng(seed), hw=(2, 2))
    pairs = list(make_temporal_offset_pairs(ds, k, with_action=True))
    assert len(pairs) == count_pairs([len(t) for t in ds.trajectories], k)
    for p in pairs:
        assert p.context_source[0] == p.target_source[0]
        assert p.target_source[1] - p.context_source[1] == k == p.offset


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 4))
def test_frame_stack_channel_property(seed, n):
    ds = random_dataset(np.random.default_rng(seed), n_traj=1, hw=(3, 2))
    out = frame_stack(ds.trajectories[0], n)
    assert out.shape == (len(ds.trajectories[0]), 3, 2, 3 * n)
