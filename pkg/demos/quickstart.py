"""Train one small model on the Experiment I arena, fly it once, and save its map.

Run from the repository root::

    python3 demos/quickstart.py [out_dir]

Takes about half a minute on one CPU core.
"""
import os
import sys

import numpy as np

from affordance_maps import analysis, env_sim, maps, planning, training
from affordance_maps.models import AffordanceModel


def main(out_dir="quickstart_out"):
    os.makedirs(out_dir, exist_ok=True)
    spec = maps.experiment_one()

    # 40 random-exploration sequences of 300 steps; a fifth held out
    data = training.generate_dataset(spec, seed=0, n_sequences=40)
    print(f"dataset: {data.n_transitions} transitions, coverage {data.coverage():.2f}")

    model = AffordanceModel(dim_c=8, dim_i=spec.n_channels, seed=0)
    losses = training.train(model, data, training.TrainConfig(epochs=10, seed=0),
                            checkpoint_dir=os.path.join(out_dir, "ckpt"))
    for rec in losses[:: max(1, len(losses) // 5)] + [losses[-1]]:
        print(f"epoch {rec.epoch:3d}  train {rec.train_nll:7.3f}  val {rec.val_nll:7.3f}")

    start, target = env_sim.sample_start_target(np.random.default_rng(0), 0)
    result = planning.control_episode(model, spec, start, target, planning.make_planner("cem"),
                                      max_steps=200, seed=0)
    print(f"episode: success={result.success} steps={len(result.records)} "
          f"mean distance {result.mean_distance:.3f}")

    img_path = os.path.join(out_dir, "affordance_map.ppm")
    analysis.render_affordance_map(model, spec, img_path)
    print(f"map written to {img_path}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
