#!/usr/bin/env python3
"""The network cell: stencil channels, three branches, hand-written gradients.

Run from the repository root:  python demos/02_network_cell.py
"""
import numpy as np

from clothnet import physics
from clothnet.grid import CHANNEL_NAMES, ClothState, build_grid
from clothnet.network import (
    NetworkParams,
    extract_channels,
    finite_diff_check,
    forward_impulse,
    nn_step,
)
from clothnet.scene_io import bundled_scene

rng = np.random.default_rng(0)

# %% Each node sees 12 neighbours.  Features are centre-minus-neighbour differences.
topo, rest = build_grid(6, 6, 0.1)
x = rest.x + 0.01 * rng.standard_normal(rest.x.shape)
state = ClothState(x, rng.standard_normal(x.shape))
feats = extract_channels(state, topo)
corner = topo.node(0, 0)
live = [CHANNEL_NAMES[c] for c in range(12) if topo.mask[corner, c]]
print("channels alive at a corner node:", live)
print("phi shape:", feats.phi.shape, " off-grid entries all zero:", bool(np.all(feats.phi[~topo.mask] == 0)))

# %% With only the bias set, every node gets the same impulse.  This is how gravity is learned.
p = NetworkParams(b_L=[0.0, 0.0, -0.0088])
print("bias-only impulse at node 7:", forward_impulse(state, topo, p)[7])

# %% Gradients are derived by hand and checked against central differences.
full = NetworkParams(w_k=rng.uniform(0.5, 1.5, 12), w_L=rng.uniform(-1, 1, 12), b_L=rng.uniform(-1, 1, 3),
                     w_N=rng.uniform(-1, 1, 12), w_D=rng.uniform(-1, 1, 12), w_V=[0.3], alpha_isru=[1.5])
for eps in (1e-2, 1e-4, 1e-6):
    print(f"eps={eps:g}: worst relative gradient error {finite_diff_check(state, topo, full, eps=eps):.2e}")

# %% Replace the cell by the simulator's own impulse and the learned step becomes
# the simulator, bit for bit.  Pins and contact handling are shared.
scene = bundled_scene("ball")
a = b = scene.initial
for k in range(100):
    a = physics.step_semi_implicit(a, scene, k * scene.dt)
    b = nn_step(b, scene, None, t=k * scene.dt, impulse_fn=lambda s: physics.pbs_impulse(s, scene))
print("100 ball-scene steps identical:", np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v))
