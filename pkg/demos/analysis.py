"""Saliency maps and an embedding export for a trained encoder checkpoint.

    python demos/analysis.py runs/tcpc/encoder.ckpt --out analysis/
"""
import argparse
from pathlib import Path

import numpy as np

from repil.bench import GridWorldConfig, generate_demonstrations
from repil.dataio import stacked_observations
from repil.evalstat import export_embeddings, saliency_map, write_pgm
from repil.models import load_encoder

parser = argparse.ArgumentParser()
parser.add_argument("checkpoint")
parser.add_argument("--out", default="analysis")
parser.add_argument("--frames", type=int, default=6)
args = parser.parse_args()

out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
encoder = load_encoder(args.checkpoint)
task = GridWorldConfig()
demos = generate_demonstrations(task, 10, task.train_layouts, rng=np.random.default_rng(1))

obs, _, _, _ = stacked_observations(demos)
for i in range(min(args.frames, len(obs))):
    heat = saliency_map(encoder, obs[i])
    write_pgm(out / f"saliency_{i}.pgm", heat)
    # where does the encoder look? report the hottest grid cell
    cell = task.render_size // task.grid_size
    pooled = heat.reshape(task.grid_size, cell, task.grid_size, cell).mean((1, 3))
    print(f"frame {i}: hottest cell {np.unravel_index(pooled.argmax(), pooled.shape)}")

n = export_embeddings(encoder, demos, ["action", "discretized_return", "trajectory_id"],
                      out / "embeddings.csv")
print(f"{n} embedding rows written to {out / 'embeddings.csv'} (project them with any t-SNE tool)")
