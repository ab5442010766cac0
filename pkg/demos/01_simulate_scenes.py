#!/usr/bin/env python3
"""Ground-truth cloth: simulate the bundled scenes and look at what happens.

Run from the repository root:  python demos/01_simulate_scenes.py
"""
import os

import numpy as np

from clothnet import physics
from clothnet.scene_io import bundled_scene, bundled_scene_names, export_obj, write_trajectory

OUT = "demo_output"
os.makedirs(OUT, exist_ok=True)

# %% The scene files ship inside the package.
print("bundled scenes:", ", ".join(bundled_scene_names()))

# %% A cloth held at its four edges sags under gravity and settles.
scene = bundled_scene("falling")
print(f"{scene.name}: {scene.topology.nx}x{scene.topology.ny} nodes, {scene.topology.spring_count()} springs,"
      f" dt={scene.dt} (stability guard {scene.stable_dt():.5f})")
traj = physics.simulate_scene(scene)
ke = [physics.kinetic_energy(traj[k], scene.material.m) for k in range(len(traj))]
print(f"kinetic energy peaks at frame {int(np.argmax(ke))} and ends at {ke[-1] / max(ke):.1%} of the peak")
print(f"lowest point after {len(traj) - 1} steps: z = {traj.x[-1, :, 2].min():.4f}")
write_trajectory(traj, os.path.join(OUT, "falling.clt1"))

# %% Pressure from below pushes the edge-pinned sheet up into a dome.
blown = physics.simulate_scene(bundled_scene("blown"))
print(f"blown: highest point z = {blown.x[-1, :, 2].max():.4f}")

# %% A free cloth dropped onto a sphere.  Contact is a projection, so nothing ever
# ends up inside the ball.
ball = bundled_scene("ball")
drop = physics.simulate_scene(ball)
sphere = ball.colliders[0]
dist = np.linalg.norm(drop.x - np.array(sphere.center), axis=-1).min(axis=1)
first = int(np.argmax(dist < sphere.radius + 1e-6))
print(f"ball: first contact at frame {first}, closest approach minus radius {dist.min() - sphere.radius:.2e}")

# %% The hanging scene: one pinned corner and a light breeze.
hang = bundled_scene("hanging")
swing = physics.simulate_scene(hang)
print(f"hanging: pinned node {hang.pins.nodes[0]} moved {np.abs(swing.x[:, hang.pins.nodes] - hang.pins.anchors).max()}")

# %% Frames can be exported as OBJ meshes for any viewer.
for k in (0, len(drop) - 1):
    export_obj(drop.x[k], ball.topology, os.path.join(OUT, f"ball_{k:04d}.obj"))
print("wrote OBJ frames to", OUT)
