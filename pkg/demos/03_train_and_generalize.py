#!/usr/bin/env python3
"""Train the cell on the falling cloth, then roll it out on a scene it never saw.

Run from the repository root:  python demos/03_train_and_generalize.py [steps]
The default 2000 optimizer steps take about two minutes on a laptop CPU.
"""
import sys

import numpy as np

from clothnet import evaluation, physics
from clothnet.grid import Trajectory
from clothnet.scene_io import bundled_scene
from clothnet.training import TrainConfig, evaluate_loss, train_loop

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000

# %% Ground truth from the simulator.
scene = bundled_scene("falling")
gt = physics.simulate_scene(scene)

# %% Evolutionary pre-search picks a scale per weight group, then Adam trains
# on random batches of 256 transitions.
ck = train_loop(TrainConfig(epochs=steps, seed=0), gt, scene)
hist = np.array([row[4] for row in ck.history])
print(f"batch loss: first {hist[0]:.3e}, last {hist[-1]:.3e}, ratio {hist[-1] / hist[0]:.3f}")
total, phys, data = evaluate_loss(ck.params, gt, scene, 0.5)
print(f"loss over all 500 transitions: {total:.3e} (physics {phys:.3e}, data {data:.3e})")
print("learned bias (gravity impulse):", ck.params.b_L, " vs g*dt =", np.array(scene.material.g) * scene.dt)

# %% Rollout on the training scene.
nn = evaluation.rollout(ck, scene, 200)
base = Trajectory(gt.nx, gt.ny, gt.dt, gt.h, gt.x[:201], gt.v[:201])
print(f"falling, 200 steps: mean error {evaluation.relative_error(nn, base):.3f}% of the cloth diagonal")

# %% A vertical cloth hung from one corner, with pressure supplied from outside
# the cell.  The cell was only trained on an edge-pinned horizontal sheet.
hang = bundled_scene("hanging")
ref = physics.simulate_scene(hang, 200)
pred = evaluation.rollout(ck, hang, 200)
series = evaluation.error_series(pred, ref)
print(f"hanging, 200 steps: mean error {series.mean():.2f}%, worst frame {series.max():.2f}%")
