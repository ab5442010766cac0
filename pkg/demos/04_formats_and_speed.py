#!/usr/bin/env python3
"""File formats and a throughput comparison on a 100 x 100 cloth.

Run from the repository root:  python demos/04_formats_and_speed.py
"""
import io

import numpy as np

from clothnet import evaluation, physics
from clothnet.network import NetworkParams
from clothnet.scene_io import bundled_scene, load_checkpoint, read_trajectory, save_checkpoint, write_trajectory

# %% Trajectories: a fixed little-endian layout, bit-exact round trip.
traj = physics.simulate_scene(bundled_scene("falling"), 20)
buf = io.BytesIO()
write_trajectory(traj, buf)
back = read_trajectory(buf.getvalue())
print(f"trajectory: {len(buf.getvalue())} bytes, round trip exact: {np.array_equal(back.x, traj.x)}")
try:
    read_trajectory(buf.getvalue()[:-8])
except ValueError as exc:
    print("truncated file:", exc)

# %% Checkpoints carry a hash of the channel order so they cannot be applied to
# a differently ordered stencil.
p = NetworkParams(w_L=np.linspace(-1, 1, 12), b_L=[0, 0, -0.009])
buf = io.BytesIO()
save_checkpoint(p, buf)
print("checkpoint round trip exact:", np.array_equal(load_checkpoint(buf.getvalue()).params.flat(), p.flat()))

# %% Learned step against the simulator step, same scene, same start.
scene = bundled_scene("bench")
for precision in ("f64", "f32"):
    nn, pbs, info = evaluation.benchmark_throughput(scene, p, steps=30, precision=precision)
    print(f"{precision}: learned {nn:.1f} step/s, simulator {pbs:.1f} step/s ({info['nodes']} nodes)")
