import csv
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from scipy import integrate, stats

from repil.bench import GridWorldConfig, expert_policy, generate_demonstrations, random_policy
from repil.evalstat import (
    ComparisonCell, ResultRecord, build_result_table, estimated_returns, evaluate_policy,
    export_embeddings, normalize_map, raw_saliency, read_pgm, read_results_csv, round_half_up,
    saliency_map, welch_one_sided, write_pgm, write_results_csv)
from repil.imitation import Policy
from repil.models import Encoder

from conftest import rel_err

CFG = GridWorldConfig()


def test_expert_scores_one_and_random_scores_less():
    assert evaluate_policy(expert_policy, CFG, n_episodes=100).mean_return == 1.0
    assert evaluate_policy(expert_policy, CFG, CFG.test_layouts, n_episodes=30).mean_return == 1.0
    for seed in range(5):
        rec = evaluate_policy(random_policy(np.random.default_rng(seed)), CFG, n_episodes=100)
        assert rec.mean_return < 1.0


def test_evaluation_deterministic():
    torch.manual_seed(0)
    pol = Policy(CFG.stacked_obs_shape, CFG.action_space)
    a = evaluate_policy(pol, CFG, n_episodes=12, seed=3, algorithm="x")
    b = evaluate_policy(pol, CFG, n_episodes=12, seed=3, algorithm="x")
    assert a == b and a.n_eval_episodes == 12
    with pytest.raises(ValueError):
        evaluate_policy(pol, CFG, n_episodes=0)


def test_results_csv_roundtrip(tmp_path):
    recs = [ResultRecord("t", "a", 0, 0.1 + 0.2, 5), ResultRecord("t", "b", 1, 1.0, 5)]
    write_results_csv(tmp_path / "results.csv", recs)
    assert read_results_csv(tmp_path / "results.csv") == recs
    header = (tmp_path / "results.csv").read_text().splitlines()[0]
    assert header == "task,algorithm,seed,mean_return,n_eval_episodes"
    with pytest.raises(ValueError):
        ResultRecord("t", "a", 0, 0.0, 0)


# ---------------------------------------------------------------------------- Welch


def test_welch_hand_fixture():
    res = welch_one_sided([2, 3, 4, 5, 6], [1, 2, 3, 4, 5])
    assert res.t == 1.0 and res.dof == 8.0
    assert res.p == pytest.approx(stats.t.sf(1.0, 8), abs=1e-15)
    # independent check: integrate the Student-t density written out by hand
    v = 8
    c = math.gamma((v + 1) / 2) / (math.sqrt(v * math.pi) * math.gamma(v / 2))
    tail, _ = integrate.quad(lambda x: c * (1 + x * x / v) ** (-(v + 1) / 2), 1.0, math.inf)
    assert res.p == pytest.approx(tail, abs=1e-9)


def test_welch_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.normal(rng.normal(), rng.uniform(0.1, 3), size=rng.integers(2, 12))
        b = rng.normal(rng.normal(), rng.uniform(0.1, 3), size=rng.integers(2, 12))
        ref = stats.ttest_ind(a, b, equal_var=False, alternative="greater")
        va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
        dof = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
        res = welch_one_sided(a, b)
        assert abs(res.t - ref.statistic) < 1e-6
        assert abs(res.p - ref.pvalue) < 1e-6
        assert abs(res.dof - dof) < 1e-6


def test_welch_invariances_and_edge_cases():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=6), rng.normal(size=5)
    base = welch_one_sided(a, b)
    for c in (0.01, 3.0, 1e4):
        scaled = welch_one_sided(a * c, b * c)
        assert scaled.t == pytest.approx(base.t, rel=1e-12)
        assert scaled.p == pytest.approx(base.p, rel=1e-9)
    shifted = welch_one_sided(a + 7.5, b + 7.5)
    assert shifted.t == pytest.approx(base.t, rel=1e-9)
    same = welch_one_sided(a, a)
    assert same.t == 0.0 and same.p == 0.5
    assert welch_one_sided([1, 1], [1, 1]).p == 0.5
    assert welch_one_sided([2, 2], [1, 1]).p == 0.0
    assert welch_one_sided([0, 0], [1, 1]).p == 1.0
    with pytest.raises(ValueError):
        welch_one_sided([1.0], [1.0, 2.0])


def _records(task, alg, values):
    return [ResultRecord(task, alg, s, float(v), 10) for s, v in enumerate(values)]


def test_table_rules(tmp_path):
    rng = np.random.default_rng(2)
    base = rng.normal(0.5, 0.05, 5)
    recs = (_records("T", "control", base)
            + _records("T", "control-copy", base)
            + _records("T", "big", base + 100 + rng.normal(0, 1e-3, 5))
            + _records("T", "overlap", base + 0.01)
            + _records("T", "worse", base - 0.2))
    table = build_result_table(recs, "control", expected=[("T", "crashed")])
    cells = table.cells
    assert not cells[("T", "control-copy")].significant
    assert not cells[("T", "control-copy")].above_baseline
    assert cells[("T", "big")].above_baseline and cells[("T", "big")].significant
    ov = cells[("T", "overlap")]
    assert ov.above_baseline and not ov.significant and ov.p_value >= 0.05
    assert not cells[("T", "worse")].above_baseline
    assert cells[("T", "crashed")] is None
    for c in cells.values():
        assert c is None or (not c.significant or c.above_baseline)
    md = table.to_markdown()
    big_line = [l for l in md.splitlines() if l.startswith("| T")][0]
    assert big_line.count("#fff7df") == 2  # big and overlap
    assert big_line.count("*") == 1 and "missing" in big_line
    table.write(tmp_path)
    rows = list(csv.DictReader((tmp_path / "table.csv").open()))
    assert [r["algorithm"] for r in rows] == ["control", "control-copy", "big", "overlap", "worse",
                                              "crashed"]
    assert rows[-1]["p_value"] == "missing"
    assert float(rows[2]["std"]) == pytest.approx(np.std(base + 100, ddof=1), abs=1e-2)
    with pytest.raises(ValueError):
        build_result_table(_records("T", "other", base), "control")
    with pytest.raises(ValueError):
        ComparisonCell(0.0, 0.0, 2, above_baseline=False, significant=True, p_value=0.01)


# ---------------------------------------------------------------------------- saliency


def test_constant_encoder_saliency_is_zero():
    enc = Encoder((8, 8, 3))
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    sal = saliency_map(enc, np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8))
    assert sal.shape == (8, 8) and not sal.any()


class _OnePixel(nn.Module):
    def forward(self, x):
        return 3.0 * x[:, 1:2, 5, 2] + 0.5


def test_single_pixel_encoder_saliency_is_one_hot():
    sal = saliency_map(_OnePixel(), torch.rand(3, 8, 8))
    expected = np.zeros((8, 8))
    expected[5, 2] = 1.0
    np.testing.assert_array_equal(sal, expected)


def test_saliency_matches_finite_differences():
    torch.manual_seed(0)
    enc = Encoder((8, 8, 6)).double()
    x = torch.rand(6, 8, 8, dtype=torch.float64)
    raw = raw_saliency(enc, x, dtype=torch.float64)
    fd = torch.zeros_like(x)
    eps = 1e-6
    with torch.no_grad():
        for idx in np.ndindex(*x.shape):
            xp, xm = x.clone(), x.clone()
            xp[idx] += eps
            xm[idx] -= eps
            fd[idx] = (enc(xp[None]).pow(2).sum() - enc(xm[None]).pow(2).sum()) / (2 * eps)
    expected = fd.abs().sum(0)
    assert rel_err(torch.as_tensor(raw), expected) < 1e-3
    sal = normalize_map(raw)
    assert sal.min() == 0.0 and sal.max() == 1.0


def test_pgm_roundtrip(tmp_path):
    heat = np.linspace(0, 1, 48 * 48).reshape(48, 48)
    write_pgm(tmp_path / "saliency_0.pgm", heat)
    back = read_pgm(tmp_path / "saliency_0.pgm")
    assert back.shape == (48, 48) and back[0, 0] == 0 and back[-1, -1] == 255
    assert (tmp_path / "saliency_0.pgm").read_bytes().startswith(b"P5\n48 48\n255\n")


# ---------------------------------------------------------------------------- embeddings


def test_round_half_up():
    np.testing.assert_array_equal(round_half_up([2.4, 2.6, 2.5, -0.4, 0.5]), [2, 3, 3, 0, 1])


def test_export_embeddings(tmp_path):
    ds = generate_demonstrations(CFG, 3, rng=np.random.default_rng(0))
    torch.manual_seed(0)
    enc = Encoder(CFG.stacked_obs_shape)
    n = export_embeddings(enc, ds, ["action", "discretized_return", "trajectory_id"],
                          tmp_path / "embeddings.csv", gamma=1.0, lam=1.0)
    rows = list(csv.reader((tmp_path / "embeddings.csv").open()))
    header, body = rows[0], rows[1:]
    assert n == len(body) == ds.n_steps
    assert header[:128] == [f"z{i}" for i in range(128)]
    assert header[128:] == ["action", "discretized_return", "trajectory_id"]
    actions = np.concatenate([t.actions for t in ds.trajectories])
    assert [int(r[128]) for r in body] == actions.tolist()
    # with gamma = lambda = 1 and a zero baseline, every frame's return is the terminal reward
    assert all(int(r[129]) == 1 for r in body)
    assert [int(r[130]) for r in body] == np.concatenate(
        [[t.trajectory_id] * len(t) for t in ds.trajectories]).tolist()
    with pytest.raises(ValueError):
        export_embeddings(enc, ds, ["colour"], tmp_path / "x.csv")


def test_estimated_return_discretisation():
    from repil.dataio import Trajectory, TrajectoryDataset, ActionSpace
    obs = np.zeros((3, 8, 8, 3), np.uint8)
    traj = Trajectory(obs, np.zeros(3, np.int64), np.array([0.4, 1.0, 1.0], np.float32), 0)
    ds = TrajectoryDataset([traj], (8, 8, 3), ActionSpace("discrete", 5), 1)
    est = estimated_returns(ds, 1.0, 1.0)
    np.testing.assert_allclose(est, [2.4, 2.0, 1.0], atol=1e-6)
    assert round_half_up(est).tolist() == [2, 2, 1]
    traj2 = Trajectory(obs, np.zeros(3, np.int64), np.array([0.6, 1.0, 1.0], np.float32), 1)
    ds2 = TrajectoryDataset([traj2], (8, 8, 3), ActionSpace("discrete", 5), 1)
    assert round_half_up(estimated_returns(ds2, 1.0, 1.0)).tolist()[0] == 3
