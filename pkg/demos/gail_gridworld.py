"""GAIL on the gridworld, optionally starting from a pretrained encoder.

    python demos/gail_gridworld.py --env-steps 100000
    python demos/gail_gridworld.py --env-steps 100000 --pretrain InverseDynamics
"""
import argparse
import copy

import numpy as np
import torch

from repil.bench import GridWorldConfig, GridWorldPool, generate_demonstrations
from repil.evalstat import evaluate_policy
from repil.harness import build_discriminator, build_policy, control_encoder, stage_rngs
from repil.imitation import GAILConfig, train_gail
from repil.repl import build_named_algorithm, train_repl

parser = argparse.ArgumentParser()
parser.add_argument("--env-steps", type=int, default=100_000)
parser.add_argument("--pretrain", default=None, help="RepL algorithm for both encoders")
parser.add_argument("--repl-batches", type=int, default=1000)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()
torch.set_num_threads(1)

task = GridWorldConfig()
demos = generate_demonstrations(task, 25, task.train_layouts, rng=np.random.default_rng(0))
config = GAILConfig(total_env_steps=args.env_steps)
rngs = stage_rngs(args.seed)

if args.pretrain:
    spec = build_named_algorithm(args.pretrain, training_batches=args.repl_batches, batch_size=64)
    encoder, _ = train_repl(spec, demos, rngs["repl"], seed=args.seed)
    disc_encoder = copy.deepcopy(encoder)
else:
    encoder = control_encoder(demos, args.seed)
    disc_encoder = control_encoder(demos, args.seed + 1)
policy = build_policy(encoder, demos, args.seed)
disc = build_discriminator(disc_encoder, demos, args.seed)
pool = GridWorldPool(task, config.n_parallel_envs, task.train_layouts, rng=rngs["gail_env"])


def report(rnd, rec, *_):
    if rnd % 5 == 0:
        print(f"round {rnd:3d}  env steps {rec['env_steps']:7d}  episode return {rec['mean_return']:.2f}"
              f"  disc acc {rec['disc_acc']:.2f}")


policy, _ = train_gail(policy, disc, pool, demos, config, rngs["il"], callbacks=[report])
for split in ("train", "test"):
    ret = evaluate_policy(policy, task, task.layout_range(split), n_episodes=100).mean_return
    print(f"{split} layouts: greedy return {ret:.2f}")
