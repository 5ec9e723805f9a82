"""Pretrain an encoder with a RepL algorithm, then fine-tune it end-to-end with BC.

The control run (same seed, no pretraining) is trained alongside so the two
returns can be compared directly.

    python demos/pretrain_then_bc.py --algorithm TemporalCPC --repl-batches 2000 --bc-batches 4000
"""
import argparse

import numpy as np
import torch

from repil.bench import GridWorldConfig, generate_demonstrations
from repil.evalstat import evaluate_policy
from repil.harness import build_policy, control_encoder, stage_rngs
from repil.imitation import BCConfig, train_bc
from repil.repl import algorithm_names, build_named_algorithm, train_repl

parser = argparse.ArgumentParser()
parser.add_argument("--algorithm", default="TemporalCPC", choices=algorithm_names())
parser.add_argument("--repl-batches", type=int, default=2000)
parser.add_argument("--repl-batch-size", type=int, default=64)
parser.add_argument("--bc-batches", type=int, default=4000)
parser.add_argument("--demos", type=int, default=25)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()
torch.set_num_threads(1)

task = GridWorldConfig()
demos = generate_demonstrations(task, args.demos, task.train_layouts, rng=np.random.default_rng(0))
print(f"{len(demos)} demonstrations, {demos.n_steps} frames")

bc_config = BCConfig(training_batches=args.bc_batches)
spec = build_named_algorithm(args.algorithm, training_batches=args.repl_batches,
                             batch_size=args.repl_batch_size)


def log_every(n, label):
    def cb(step, record, *_):
        if (step + 1) % n == 0:
            print(f"  [{label}] step {step + 1}: loss {record['total']:.4f}")
    return cb


returns = {}
for name in ("control", args.algorithm):
    rngs = stage_rngs(args.seed)
    if name == "control":
        encoder = control_encoder(demos, args.seed)
    else:
        print(f"pretraining {name} for {args.repl_batches} batches")
        encoder, _ = train_repl(spec, demos, rngs["repl"], seed=args.seed,
                                callbacks=[log_every(500, name)])
    policy = build_policy(encoder, demos, args.seed)
    print(f"BC ({name})")
    policy, _ = train_bc(policy, demos, bc_config, rngs["il"], callbacks=[log_every(1000, "bc")])
    for split in ("train", "test"):
        rec = evaluate_policy(policy, task, task.layout_range(split), n_episodes=100)
        returns[(name, split)] = rec.mean_return

for (name, split), ret in returns.items():
    print(f"{name:>20s} {split:>5s} layouts: mean return {ret:.2f}")
