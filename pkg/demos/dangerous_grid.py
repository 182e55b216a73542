"""Exact open-loop empowerment in the dangerous world.

The square rewards correct-parity moves and punishes the rest with a trap,
and half of all moves slip.  A committed action sequence cannot react to a
slip, so its empowerment inside the square shrinks as the sequence grows,
while the safe corridor keeps its value.

Run:  python demos/dangerous_grid.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from intrinsic_control.environments import tabular_model
from intrinsic_control.exact_empowerment import empowerment_map
from intrinsic_control.environments import grid_values
from intrinsic_control.harness import DANGEROUS_DEFAULT, dangerous_profile, emit_heatmap, write_grid_csv

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/dangerous_grid")
out.mkdir(parents=True, exist_ok=True)

spec = DANGEROUS_DEFAULT
model = tabular_model(spec)
print(f"{model.n_states} states, {model.n_actions} actions")

print(" T  square-mean  centre  corridor")
for T in range(1, 7):
    grid = grid_values(model, empowerment_map(model, T))
    prof = dangerous_profile(grid, spec)
    csv = out / f"empowerment_T{T}.csv"
    write_grid_csv(csv, grid)
    emit_heatmap(csv)
    print(f"{T:2d}  {prof['interior_mean']:10.4f}  {prof['centre']:6.3f}  {prof['corridor']:8.3f}")

print(f"maps written to {out}/ (CSV and PGM)")
