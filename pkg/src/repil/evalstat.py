"""Policy evaluation, significance testing, result tables and representation analysis."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from scipy import stats

from .bench import GridWorldConfig, GridWorldPool
from .dataio import TrajectoryDataset, stacked_observations
from .imitation.gail import gae_advantages
from .models import obs_to_tensor

RESULT_FIELDS = ("task", "algorithm", "seed", "mean_return", "n_eval_episodes")
HIGHLIGHT = "#fff7df"


@dataclass(frozen=True)
class ResultRecord:
    task: str
    algorithm: str
    seed: int
    mean_return: float
    n_eval_episodes: int

    def __post_init__(self):
        if self.n_eval_episodes < 1:
            raise ValueError("n_eval_episodes must be >= 1")


# ---------------------------------------------------------------------------
# evaluation


def _policy_actions(policy, obs: np.ndarray, states, rng) -> np.ndarray:
    if isinstance(policy, nn.Module):
        with torch.no_grad():
            return policy.act(obs_to_tensor(obs), greedy=True).numpy()
    return np.asarray(policy(obs, states))


def evaluate_policy(policy: Union[nn.Module, Callable], config: GridWorldConfig,
                    layout_range: Optional[range] = None, n_episodes: int = 100,
                    rng: Optional[np.random.Generator] = None, task: str = "gridworld",
                    algorithm: str = "policy", seed: int = 0, chunk: int = 100) -> ResultRecord:
    """Mean return over ``n_episodes`` episodes on layouts taken in order from ``layout_range``.

    ``policy`` is either a :class:`~repil.imitation.Policy` (greedy actions) or
    a callable ``(stacked_obs, env_states) -> actions``. Episode k runs on
    ``layout_range[k % len(layout_range)]``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    layout_range = config.train_layouts if layout_range is None else layout_range
    rng = np.random.default_rng(seed) if rng is None else rng
    if isinstance(policy, nn.Module):
        policy.eval()
    returns = []
    for start in range(0, n_episodes, chunk):
        n = min(chunk, n_episodes - start)
        pool = GridWorldPool(config, n, layout_range, sequential=True, first_episode=start)
        obs = pool.reset()
        pending = np.ones(n, dtype=bool)
        ep_returns = np.zeros(n)
        while pending.any():
            actions = _policy_actions(policy, obs, pool.states, rng)
            obs, _, dones, infos = pool.step(actions)
            for i in np.flatnonzero(dones & pending):
                ep_returns[i] = infos[i]["episode_return"]
                pending[i] = False
        returns.extend(ep_returns.tolist())
    return ResultRecord(task, algorithm, seed, float(np.mean(returns)), n_episodes)


def write_results_csv(path, records: Iterable[ResultRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_FIELDS)
        for r in records:
            w.writerow([r.task, r.algorithm, r.seed, repr(float(r.mean_return)), r.n_eval_episodes])


def read_results_csv(path) -> list:
    with Path(path).open(newline="") as f:
        rows = list(csv.DictReader(f))
    return [ResultRecord(r["task"], r["algorithm"], int(r["seed"]), float(r["mean_return"]),
                         int(r["n_eval_episodes"])) for r in rows]


# ---------------------------------------------------------------------------
# statistics


class WelchResult(NamedTuple):
    t: float
    dof: float
    p: float


def welch_one_sided(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Welch's t-test of H1: mean(a) > mean(b).

    When both samples have zero variance the statistic is undefined; then
    p = 0.5 for equal means, otherwise 0 (a above b) or 1 (a below b), with
    t = 0 or +-inf and dof = n_a + n_b - 2.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ValueError("Welch's test needs at least two samples on each side")
    va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
    diff = a.mean() - b.mean()
    if va + vb == 0:
        if diff == 0:
            return WelchResult(0.0, float(na + nb - 2), 0.5)
        return WelchResult(math.copysign(math.inf, diff), float(na + nb - 2), 0.0 if diff > 0 else 1.0)
    t = diff / math.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
    p = float(stats.t.sf(t, dof))
    return WelchResult(float(t), float(dof), p)


@dataclass(frozen=True)
class ComparisonCell:
    mean: float
    std: float
    n: int
    above_baseline: bool
    significant: bool
    p_value: float

    def __post_init__(self):
        if self.significant and not self.above_baseline:
            raise ValueError("a significant cell must lie above the baseline")

    def text(self, digits: int = 2) -> str:
        s = f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"
        return s + "*" if self.significant else s


@dataclass
class ResultTable:
    tasks: list
    algorithms: list
    baseline: str
    cells: dict = field(default_factory=dict)  # (task, algorithm) -> ComparisonCell | None

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task", "algorithm", "n_seeds", "mean", "std", "above_baseline",
                        "significant", "p_value"])
            for task in self.tasks:
                for alg in self.algorithms:
                    c = self.cells.get((task, alg))
                    if c is None:
                        w.writerow([task, alg, 0, "", "", "", "", "missing"])
                    else:
                        w.writerow([task, alg, c.n, repr(c.mean), repr(c.std), int(c.above_baseline),
                                    int(c.significant), repr(c.p_value)])

    def to_markdown(self, digits: int = 2) -> str:
        lines = ["| task | " + " | ".join(self.algorithms) + " |",
                 "|---|" + "---|" * len(self.algorithms)]
        for task in self.tasks:
            row = []
            for alg in self.algorithms:
                c = self.cells.get((task, alg))
                if c is None:
                    row.append("missing")
                elif c.above_baseline:
                    row.append(f'<span style="background-color:{HIGHLIGHT}">{c.text(digits)}</span>')
                else:
                    row.append(c.text(digits))
            lines.append(f"| {task} | " + " | ".join(row) + " |")
        lines.append("")
        lines.append(f"Mean ± standard deviation over seeds. Highlighted cells beat the "
                     f"{self.baseline} mean; * marks p < 0.05 under a one-sided Welch test.")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> None:
        directory = Path(directory)
        self.to_csv(directory / "table.csv")
        (directory / "table.md").write_text(self.to_markdown())


def build_result_table(records: Sequence[ResultRecord], baseline_algorithm: str,
                       expected: Optional[Sequence[tuple]] = None, alpha: float = 0.05) -> ResultTable:
    """Aggregate per-seed records into mean ± std cells compared against the baseline.

    ``expected`` lists (task, algorithm) pairs that should appear; pairs without
    records become missing cells.
    """
    groups: dict = {}
    tasks, algorithms = [], [baseline_algorithm]
    for r in records:
        groups.setdefault((r.task, r.algorithm), []).append(r.mean_return)
    for task, alg in list(groups) + list(expected or ()):
        if task not in tasks:
            tasks.append(task)
        if alg not in algorithms:
            algorithms.append(alg)
    table = ResultTable(tasks, algorithms, baseline_algorithm)
    for task in tasks:
        base = groups.get((task, baseline_algorithm))
        if not base:
            raise ValueError(f"no {baseline_algorithm!r} baseline results for task {task!r}")
        for alg in algorithms:
            vals = groups.get((task, alg))
            if not vals:
                table.cells[(task, alg)] = None
                continue
            vals_a = np.asarray(vals, dtype=np.float64)
            mean = float(vals_a.mean())
            std = float(vals_a.std(ddof=1)) if len(vals_a) > 1 else 0.0
            above = mean > float(np.mean(base))
            p = (welch_one_sided(vals_a, base).p
                 if len(vals_a) >= 2 and len(base) >= 2 else float("nan"))
            table.cells[(task, alg)] = ComparisonCell(mean, std, len(vals_a), above,
                                                      bool(above and p < alpha), p)
    return table


# ---------------------------------------------------------------------------
# saliency


def _as_batch(obs, dtype) -> torch.Tensor:
    if isinstance(obs, np.ndarray):
        if obs.ndim == 3:
            obs = obs[None]
        return obs_to_tensor(obs, dtype=dtype)
    obs = torch.as_tensor(obs, dtype=dtype)
    return obs[None] if obs.ndim == 3 else obs


def raw_saliency(encoder: nn.Module, obs, dtype=torch.float32) -> np.ndarray:
    """|d ||z||^2 / d pixel| summed over channels (including stacked frames); shape (H, W)."""
    x = _as_batch(obs, dtype).detach().clone().requires_grad_(True)
    if x.shape[0] != 1:
        raise ValueError("saliency takes a single observation")
    z = encoder(x)
    if isinstance(z, tuple):
        z = z[0]
    (grad,) = torch.autograd.grad(z.pow(2).sum(), x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    if not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite saliency gradient")
    return grad[0].abs().sum(dim=0).detach().numpy()


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; an all-zero map stays all-zero."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == 0 and lo == 0:
        return np.zeros_like(raw)
    if hi == lo:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def saliency_map(encoder: nn.Module, obs, dtype=torch.float32) -> np.ndarray:
    return normalize_map(raw_saliency(encoder, obs, dtype))


def write_pgm(path, heatmap: np.ndarray) -> None:
    """Binary 8-bit grayscale PGM of a [0, 1] map."""
    heatmap = np.asarray(heatmap)
    if heatmap.ndim != 2:
        raise ValueError("PGM maps must be 2-d")
    img = np.round(np.clip(heatmap, 0, 1) * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# embeddings

LABELERS = ("action", "discretized_return", "trajectory_id")


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def estimated_returns(dataset: TrajectoryDataset, gamma: float, lam: float) -> np.ndarray:
    """Per-frame GAE return estimate with a zero value baseline, concatenated over trajectories."""
    out = []
    for traj in dataset.trajectories:
        r = np.asarray(traj.rewards, dtype=np.float64)
        dones = np.zeros(len(r))
        dones[-1] = 1.0
        out.append(gae_advantages(r, np.zeros_like(r), dones, gamma, lam))
    return np.concatenate(out) if out else np.zeros(0)


@torch.no_grad()
def compute_embeddings(encoder: nn.Module, obs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    chunks = []
    for i in range(0, len(obs), batch_size):
        z = encoder(obs_to_tensor(obs[i:i + batch_size]))
        chunks.append((z[0] if isinstance(z, tuple) else z).numpy())
    return np.concatenate(chunks) if chunks else np.zeros((0, 0))


def export_embeddings(encoder: nn.Module, dataset: TrajectoryDataset, labelers: Sequence[str],
                      path, gamma: float = 0.99, lam: float = 0.95) -> int:
    """One CSV row per frame: embedding columns ``z0..`` then one column per labeler.

    ``discretized_return`` is the GAE return estimate (zero value baseline)
    rounded to the nearest integer, halves rounding up. Returns the row count.
    """
    unknown = [l for l in labelers if l not in LABELERS]
    if unknown:
        raise ValueError(f"unknown labelers {unknown}; choose from {LABELERS}")
    encoder.eval()
    obs, actions, traj_ids, _ = stacked_observations(dataset)
    emb = compute_embeddings(encoder, obs)
    columns = {}
    for name in labelers:
        if name == "action":
            columns[name] = np.asarray(actions)
        elif name == "trajectory_id":
            columns[name] = traj_ids
        else:
            columns[name] = round_half_up(estimated_returns(dataset, gamma, lam))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        header = [f"z{i}" for i in range(emb.shape[1])] if len(emb) else []
        w.writerow(header + list(labelers))
        for i in range(len(obs)):
            labels = []
            for name in labelers:
                v = columns[name][i]
                labels.append(" ".join(repr(float(x)) for x in v) if np.ndim(v) else int(v))
            w.writerow([f"{x:.6g}" for x in emb[i]] + labels)
    return len(obs)
