import numpy as np
import pytest
import torch

from repil.dataio import ActionSpace, Trajectory, TrajectoryDataset

torch.set_num_threads(1)


def random_dataset(rng, n_traj=None, max_len=12, hw=(6, 6), channels=3, n_actions=5,
                   frame_stack=3, continuous=False):
    n_traj = int(rng.integers(0, 6)) if n_traj is None else n_traj
    trajs = []
    for i in range(n_traj):
        T = int(rng.integers(1, max_len + 1))
        obs = rng.integers(0, 256, size=(T,) + hw + (channels,), dtype=np.uint8)
        if continuous:
            acts = rng.normal(size=(T, n_actions)).astype(np.float32)
        else:
            acts = rng.integers(0, n_actions, size=T)
        rews = rng.normal(size=T).astype(np.float32)
        trajs.append(Trajectory(obs, acts, rews, trajectory_id=100 + 7 * i))
    space = ActionSpace("continuous" if continuous else "discrete", n_actions)
    return TrajectoryDataset(trajs, hw + (channels,), space, frame_stack)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset(rng):
    return random_dataset(rng, n_traj=3)


def central_difference(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (double precision)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            hi = float(f(x))
            flat[i] = old - eps
            lo = float(f(x))
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def autograd_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


# criterion label -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    order = sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k))
    for label in order:
        ok, detail = ACCEPTANCE[label]
        terminalreporter.write_line(f"criterion {label}: {'PASS' if ok else 'FAIL'} - {detail}")
