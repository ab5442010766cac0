"""Learned rollouts, accuracy against the simulator, and throughput timing."""

from __future__ import annotations

import csv
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .grid import Trajectory
from .network import NetworkParams, nn_step
from .physics import SimulationError, apply_dirichlet, step_semi_implicit

__all__ = [
    "EvalReport",
    "rollout",
    "relative_error",
    "error_series",
    "benchmark_throughput",
    "evaluate",
    "environment_info",
]


def _params_of(checkpoint):
    if isinstance(checkpoint, NetworkParams):
        return checkpoint
    return checkpoint.params


def _check_compatible(traj_a, traj_b):
    if traj_a.x.shape != traj_b.x.shape:
        raise ValueError(f"trajectory shapes differ: {traj_a.x.shape} vs {traj_b.x.shape}")


def rollout(checkpoint, scene, steps=None, dtype=np.float64):
    """Iterate the learned step from the scene's initial state.

    ``checkpoint`` may be a :class:`~clothnet.training.Checkpoint` or bare
    :class:`~clothnet.network.NetworkParams`.  Returns ``steps + 1`` frames.
    """
    params = _params_of(checkpoint)
    steps = scene.steps if steps is None else int(steps)
    if steps < 0:
        raise ValueError("steps must be non-negative")
    state = apply_dirichlet(scene.initial, scene.pins, 0.0).astype(dtype)
    n = scene.topology.n_nodes
    xs = np.empty((steps + 1, n, 3), dtype=dtype)
    vs = np.empty_like(xs)
    xs[0], vs[0] = state.x, state.v
    for k in range(steps):
        try:
            state = nn_step(state, scene, params, t=k * scene.dt)
        except SimulationError as exc:
            raise type(exc)(f"frame {k + 1}: {exc}") from exc
        xs[k + 1], vs[k + 1] = state.x, state.v
    topo = scene.topology
    return Trajectory(topo.nx, topo.ny, scene.dt, topo.h, xs, vs)


def _diagonal(baseline):
    x0 = baseline.x[0]
    return float(np.linalg.norm(x0.max(axis=0) - x0.min(axis=0)))


def error_series(traj_nn, traj_pbs, skip_first=False):
    """Per-frame mean node distance as a percentage of the baseline's frame-0 box diagonal."""
    _check_compatible(traj_nn, traj_pbs)
    diag = _diagonal(traj_pbs)
    if diag == 0:
        raise ValueError("baseline frame 0 has a degenerate bounding box")
    dist = np.linalg.norm(traj_nn.x - traj_pbs.x, axis=-1).mean(axis=-1)
    series = 100.0 * dist / diag
    return series[1:] if skip_first and len(series) > 1 else series


def relative_error(traj_nn, traj_pbs, skip_first=False):
    """Mean over frames and nodes of ``|x_nn - x_pbs| / D`` in percent.

    ``D`` is the bounding-box diagonal of ``traj_pbs`` at frame 0, so the
    metric is not symmetric in its arguments.  ``skip_first`` drops frame 0,
    which two rollouts from the same initial state always share.
    """
    return float(np.mean(error_series(traj_nn, traj_pbs, skip_first)))


def environment_info(precision="f64"):
    threads = os.environ.get("OMP_NUM_THREADS") or os.environ.get("OPENBLAS_NUM_THREADS") or "default"
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "threads": threads,
        "precision": precision,
    }


def _timed_loop(step, state, steps, warmup, dt):
    for k in range(warmup):
        state = step(state, k * dt)
    t0 = time.perf_counter()
    for k in range(steps):
        state = step(state, (warmup + k) * dt)
    elapsed = time.perf_counter() - t0
    return steps / max(elapsed, 1e-12)


def benchmark_throughput(scene, checkpoint, steps=50, warmup=5, precision="f64"):
    """Steps per second of the learned rollout and of the simulator on the same scene.

    Both loops start from the same initial state and are timed after
    ``warmup`` untimed steps.  Returns ``(nn_sps, pbs_sps, info)``.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    dtype = {"f32": np.float32, "f64": np.float64}[precision]
    params = _params_of(checkpoint)
    start = apply_dirichlet(scene.initial, scene.pins, 0.0).astype(dtype)
    nn_sps = _timed_loop(lambda s, t: nn_step(s, scene, params, t=t), start, steps, warmup, scene.dt)
    pbs_sps = _timed_loop(lambda s, t: step_semi_implicit(s, scene, t), start, steps, warmup, scene.dt)
    info = environment_info(precision)
    info.update(steps=steps, warmup=warmup, nodes=scene.topology.n_nodes)
    return nn_sps, pbs_sps, info


@dataclass
class EvalReport:
    errors: np.ndarray
    mean_error: float
    nn_steps_per_sec: float | None = None
    pbs_steps_per_sec: float | None = None
    scene_id: str = ""
    checkpoint_id: str = ""
    extra: dict = field(default_factory=dict)

    def write_csv(self, sink):
        w = csv.writer(sink, lineterminator="\n")
        w.writerow(["scene", "checkpoint", "frame", "relative_error_percent"])
        for k, e in enumerate(self.errors):
            w.writerow([self.scene_id, self.checkpoint_id, k, repr(float(e))])
        w.writerow([self.scene_id, self.checkpoint_id, "mean", repr(float(self.mean_error))])

    def summary(self):
        line = f"scene={self.scene_id} checkpoint={self.checkpoint_id} mean_error={self.mean_error:.4f}%"
        if self.nn_steps_per_sec is not None:
            line += f" nn_sps={self.nn_steps_per_sec:.1f} pbs_sps={self.pbs_steps_per_sec:.1f}"
        return line


def evaluate(traj_nn, traj_pbs, scene_id="", checkpoint_id=""):
    series = error_series(traj_nn, traj_pbs)
    return EvalReport(series, float(series.mean()), scene_id=scene_id, checkpoint_id=checkpoint_id)
