"""Open- versus closed-loop options in a noisy grid.

After every step the world shoves the agent in a random direction with
probability 0.2.  A closed-loop actor sees where it landed and corrects;
an open-loop actor sees only its start and end and must commit blind.
Both are trained with the same budget; exp(mean R_I) is roughly the
number of final states each can reliably tell apart.

Run:  python demos/open_vs_closed.py [episodes] [horizon]
"""
import sys

import numpy as np

from intrinsic_control.environments import GridSpec, tabular_model
from intrinsic_control.exact_empowerment import empowerment_map
from intrinsic_control.implicit_vic import ImplicitConfig, Trainer

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 16000
T = int(sys.argv[2]) if len(sys.argv) > 2 else 4
spec = GridSpec(width=6, height=6, push_noise_prob=0.2)

# exact open-loop capacity from a centre cell, for scale
model = tabular_model(spec)
centre = model.index(((3, 3), (), False))
if T <= 4:
    exact = np.nanmax(empowerment_map(model, T, states=[centre]))
    print(f"exact open-loop capacity from (3, 3), T={T}: {exact:.3f} nats (x{np.exp(exact):.1f})")

for open_loop in (True, False):
    cfg = ImplicitConfig(horizon=T, episodes=episodes, open_loop=open_loop)
    tr = Trainer(spec, cfg, seed=0)
    tr.train(on_batch=lambda s, _: s.episodes % (episodes // 4) == 0 and
             print(f"  {s.episodes:6d} episodes  R_I {s.mean_R_I:.3f}"))
    ev = tr.evaluate(32)
    label = "open " if open_loop else "closed"
    print(f"{label} loop: mean R_I {ev['mean_R_I']:.3f} nats, exp {ev['exp_R_I']:.2f}")
