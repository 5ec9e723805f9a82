"""BC with a RepL objective as an auxiliary loss on the shared encoder.

Sweeps the auxiliary weight; weight 0 reproduces plain BC exactly, which the
script checks on the first steps.

    python demos/joint_training.py --algorithm SimCLR --weights 0 0.1 1 --batches 2000
"""
import argparse

import numpy as np
import torch

from repil.bench import GridWorldConfig, generate_demonstrations
from repil.evalstat import evaluate_policy
from repil.harness import build_policy, control_encoder, stage_rngs, train_joint
from repil.imitation import BCConfig, train_bc
from repil.repl import RepLModel, build_named_algorithm

parser = argparse.ArgumentParser()
parser.add_argument("--algorithm", default="SimCLR")
parser.add_argument("--weights", type=float, nargs="+", default=[0.0, 0.1, 1.0])
parser.add_argument("--batches", type=int, default=2000)
parser.add_argument("--repl-batch-size", type=int, default=32)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()
torch.set_num_threads(1)

task = GridWorldConfig()
demos = generate_demonstrations(task, 25, task.train_layouts, rng=np.random.default_rng(0))
bc_config = BCConfig(training_batches=args.batches)
spec = build_named_algorithm(args.algorithm, batch_size=args.repl_batch_size,
                             training_batches=args.batches)

rngs = stage_rngs(args.seed)
control = build_policy(control_encoder(demos, args.seed), demos, args.seed)
control, control_hist = train_bc(control, demos, bc_config, rngs["il"])
print(f"control: return {evaluate_policy(control, task, n_episodes=100).mean_return:.2f}")

for w in args.weights:
    rngs = stage_rngs(args.seed)
    torch.manual_seed(args.seed)
    model = RepLModel(spec, task.stacked_obs_shape, demos.action_space)
    policy = build_policy(model.encoder, demos, args.seed)
    policy, hist = train_joint(policy, model, demos, demos, bc_config, w, rngs["il"], rngs["repl"])
    same = [h["bc"] for h in hist[:50]] == [h["total"] for h in control_hist[:50]]
    ret = evaluate_policy(policy, task, n_episodes=100).mean_return
    print(f"aux_weight {w:g}: return {ret:.2f}, final bc {hist[-1]['bc']:.4f}, "
          f"final repl {hist[-1]['repl']:.4f}" + (" (first 50 BC losses equal control)" if same else ""))
