"""Discovering a fixed set of options on a small grid.

Thirty options share one tabular Q-function.  Each episode picks an option
uniformly, follows it until a coin with p=0.05 says stop, and pays out
log q(option | start, final) - log p(option).  As the inference table gets
sharper, options are pushed toward different corners of the grid.

Run:  python demos/explicit_options.py [episodes] [seed]
"""
import sys

import numpy as np

from intrinsic_control.environments import GridSpec, make_env
from intrinsic_control.explicit_vic import (
    ExplicitConfig, TabularWorld, evaluate_explicit, option_prediction_map, specialised_options,
    train_explicit,
)

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 20000
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

world = TabularWorld(make_env(GridSpec(width=6, height=6)))
cfg = ExplicitConfig(n_options=30, termination_prob=0.05, episodes=episodes)
rng = np.random.default_rng(seed)


def progress(log, agent):
    if (log.episode + 1) % (episodes // 10) == 0:
        print(f"episode {log.episode + 1:6d}  eps {cfg.epsilon(log.episode):.2f}  "
              f"b(s0) {log.baseline:6.3f}")


agent, logs = train_explicit(world, cfg, rng, on_episode=progress)
ev = evaluate_explicit(world, agent, cfg, rng)
print(f"\nmean r_I {ev['mean_r_I']:.3f} +- {ev['stderr_r_I']:.3f} nats "
      f"(ln 30 = {np.log(30):.3f}); q top-1 accuracy {ev['accuracy']:.2f}")

pred = option_prediction_map(agent.q, world.model, s0=0)
print(f"options owning a cell with q > 0.5: {specialised_options(pred)} / {cfg.n_options}")

# which option "owns" each cell, seen from the top-left start
owner = np.nanargmax(np.nan_to_num(pred, nan=-1.0), axis=0)
print("\nmost likely option per final cell:")
for row in owner:
    print(" ".join(f"{k:2d}" for k in row))
