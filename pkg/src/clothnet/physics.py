"""Ground-truth mass-spring physics.

Force evaluators accept a :class:`~clothnet.grid.ClothState` whose arrays may
carry leading batch axes; every sum over stencil channels runs in channel
order so results are reproducible bit for bit.
"""

from __future__ import annotations

import warnings

import numpy as np

from .grid import NUM_CHANNELS, ClothState, Trajectory

__all__ = [
    "SimulationError",
    "SingularSpringError",
    "NonFiniteStateError",
    "elastic_force",
    "damping_force",
    "pressure_force",
    "external_force",
    "total_force",
    "pbs_impulse",
    "apply_dirichlet",
    "resolve_sphere_collision",
    "project_out_of_sphere",
    "advance",
    "step_semi_implicit",
    "simulate_scene",
    "kinetic_energy",
    "spring_energy",
    "pinned_mask",
    "plugin_impulse",
    "force_terms",
]

# counter-clockwise cardinal pairs (E,N) (N,W) (W,S) (S,E)
PRESSURE_PAIRS = ((0, 1), (1, 2), (2, 3), (3, 0))


class SimulationError(RuntimeError):
    pass


class SingularSpringError(SimulationError):
    pass


class NonFiniteStateError(SimulationError):
    pass


def _grid_view(a, topology):
    return a.reshape(a.shape[:-2] + (topology.ny, topology.nx, 3))


def _sub(a, sl):
    return a[(Ellipsis,) + sl + (slice(None),)]


def _check_coincident(r, topology, c, ctr):
    if np.any(r == 0):
        hit = np.argwhere(r[..., 0] == 0)[0]
        iy = hit[-2] + ctr[0].start
        ix = hit[-1] + ctr[1].start
        raise SingularSpringError(
            f"coincident nodes on spring: node {topology.node(ix, iy)} channel {c}"
        )


def elastic_force(state, topology, E):
    """Spring force ``-sum_j E * x_ij/|x_ij| * (|x_ij| - L_ij)`` on every node."""
    X = _grid_view(state.x, topology)
    F = np.zeros_like(X)
    for c in range(NUM_CHANNELS):
        ctr, nb = topology.channel_slices(c)
        d = _sub(X, ctr) - _sub(X, nb)
        r = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
        _check_coincident(r, topology, c, ctr)
        _sub(F, ctr)[...] -= E * (d / r) * (r - topology.rest[c])
    return F.reshape(state.x.shape)


def damping_force(state, topology, mu):
    """Spring damping ``-sum_j mu * (v_ij . n_ij) n_ij`` with ``n_ij`` the unit ``x_ij``."""
    X = _grid_view(state.x, topology)
    V = _grid_view(state.v, topology)
    F = np.zeros_like(X)
    for c in range(NUM_CHANNELS):
        ctr, nb = topology.channel_slices(c)
        d = _sub(X, ctr) - _sub(X, nb)
        r = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
        _check_coincident(r, topology, c, ctr)
        n = d / r
        dv = _sub(V, ctr) - _sub(V, nb)
        _sub(F, ctr)[...] -= mu * np.sum(dv * n, axis=-1, keepdims=True) * n
    return F.reshape(state.x.shape)


def _cardinal_differences(X, topology):
    out = []
    for c in range(4):
        ctr, nb = topology.channel_slices(c)
        d = np.zeros_like(X)
        _sub(d, ctr)[...] = _sub(X, ctr) - _sub(X, nb)
        out.append(d)
    return out


def pressure_force(state, topology, p):
    """Pressure ``sum p * (x_ij1 x x_ij2)`` over the four counter-clockwise cardinal pairs.

    A pair whose neighbours are not both on the grid contributes nothing.  On a
    sheet built in plane ``ab`` the force points along ``+e_a x e_b`` for
    ``p > 0``.
    """
    if p == 0:
        return np.zeros_like(state.x)
    X = _grid_view(state.x, topology)
    d = _cardinal_differences(X, topology)
    F = np.zeros_like(X)
    for c1, c2 in PRESSURE_PAIRS:
        F += p * np.cross(d[c1], d[c2])
    return F.reshape(state.x.shape)


def external_force(state, m, g, d):
    """Gravity plus linear air drag, ``m*g - d*v``."""
    g = np.asarray(g, dtype=state.v.dtype)
    return m * g - d * state.v


def _scene_pressure(scene):
    return scene.material.p * scene.pressure_side


def force_terms(state, scene, include_pressure=True):
    mat = scene.material
    terms = {
        "elastic": elastic_force(state, scene.topology, mat.E),
        "damping": damping_force(state, scene.topology, mat.mu),
    }
    if include_pressure and mat.p != 0:
        terms["pressure"] = pressure_force(state, scene.topology, _scene_pressure(scene))
    terms["external"] = external_force(state, mat.m, mat.g, mat.d)
    return terms


def _sum_terms(terms, state):
    total = None
    for name, f in terms.items():
        total = f if total is None else total + f
    if not np.isfinite(total).all():
        for name, f in terms.items():
            bad = np.argwhere(~np.isfinite(f))
            if len(bad):
                raise NonFiniteStateError(f"non-finite {name} force at node {bad[0][-2]}")
        raise NonFiniteStateError("non-finite total force")
    return total


def total_force(state, scene, include_pressure=True):
    """Sum of all analytic forces on ``state``.

    With ``include_pressure=False`` the pressure term is left out, which is the
    target the learned cell sees when pressure is plugged in at rollout.
    """
    return _sum_terms(force_terms(state, scene, include_pressure), state)


def pbs_impulse(state, scene, include_pressure=True):
    """Velocity increment ``f * dt / m`` produced by the analytic forces."""
    return total_force(state, scene, include_pressure) * scene.dt / scene.material.m


def plugin_impulse(state, scene):
    """Velocity increment from forces applied outside the learned cell."""
    if scene.pressure_plugged and scene.material.p != 0:
        f = pressure_force(state, scene.topology, _scene_pressure(scene))
        return f * scene.dt / scene.material.m
    return None


def apply_dirichlet(state, pins, t):
    """Put pinned nodes on their anchor path at time ``t``."""
    if len(pins) == 0:
        return state
    x = state.x.copy()
    v = state.v.copy()
    x[..., pins.nodes, :] = pins.anchors + pins.velocity * t
    v[..., pins.nodes, :] = pins.velocity
    return ClothState(x, v)


def _unit(a):
    r = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    fallback = np.zeros_like(a)
    fallback[..., 2] = 1.0
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, a / safe, fallback), r[..., 0]


def _contact_response(v, normal, friction):
    vn = np.sum(v * normal, axis=-1, keepdims=True)
    v_t = v - vn * normal
    return np.maximum(vn, 0.0) * normal + (1.0 - friction) * v_t


def project_out_of_sphere(x, sphere):
    """Move nodes found inside ``sphere`` radially onto its surface.

    Returns the projected positions and the boolean mask of moved nodes.
    """
    center = np.asarray(sphere.center, dtype=x.dtype)
    n, dist = _unit(x - center)
    inside = dist < sphere.radius
    if not inside.any():
        return x, inside
    x = np.where(inside[..., None], center + sphere.radius * n, x)
    return x, inside


def resolve_sphere_collision(state, sphere):
    """Project penetrating nodes to the sphere surface and absorb their normal motion.

    The inward normal velocity is removed and the tangential velocity is
    scaled by ``1 - friction``.
    """
    center = np.asarray(sphere.center, dtype=state.x.dtype)
    n, dist = _unit(state.x - center)
    inside = (dist < sphere.radius)[..., None]
    if not inside.any():
        return state
    x = np.where(inside, center + sphere.radius * n, state.x)
    v = np.where(inside, _contact_response(state.v, n, sphere.friction), state.v)
    return ClothState(x, v)


def advance(state, impulse, scene, t, return_mask=False):
    """Shared update chain used by both the simulator and the learned step.

    ``v' = v + impulse``; pinned velocities and contact response; ``x' = x + v'*dt``;
    intersection elimination; re-pin at ``t + dt``.  With ``return_mask`` the
    boolean ``(..., n)`` mask of nodes touched by any constraint is returned too.
    """
    dt = scene.dt
    v = state.v + impulse
    pins = scene.pins
    touched = np.zeros(v.shape[:-1], dtype=bool) if return_mask else None
    if len(pins):
        v[..., pins.nodes, :] = pins.velocity
        if return_mask:
            touched[..., pins.nodes] = True
    for sphere in scene.colliders:
        center = np.asarray(sphere.center, dtype=v.dtype)
        pred = state.x + v * dt
        _, dist = _unit(pred - center)
        hit = dist < sphere.radius
        if hit.any():
            n, _ = _unit(state.x - center)
            v = np.where(hit[..., None], _contact_response(v, n, sphere.friction), v)
            if return_mask:
                touched |= hit
    x = state.x + v * dt
    for sphere in scene.colliders:
        x, moved = project_out_of_sphere(x, sphere)
        if return_mask:
            touched |= moved
    if len(pins):
        x[..., pins.nodes, :] = pins.anchors + pins.velocity * (t + dt)
    out = ClothState(x, v)
    if not out.is_finite():
        bad = np.argwhere(~(np.isfinite(x) & np.isfinite(v)))[0]
        raise NonFiniteStateError(f"non-finite state at node {bad[-2]} after step at t={np.min(t):g}")
    return (out, touched) if return_mask else out


def pinned_mask(shape, scene):
    """Boolean mask of pinned nodes broadcast to ``shape`` (``(..., n)``)."""
    mask = np.zeros(shape, dtype=bool)
    if len(scene.pins):
        mask[..., scene.pins.nodes] = True
    return mask


def step_semi_implicit(state, scene, t=0.0):
    """One semi-implicit Euler step of the analytic model from time ``t``."""
    return advance(state, pbs_impulse(state, scene), scene, t)


def simulate_scene(scene, steps=None, progress=None):
    """Run the simulator from ``scene.initial`` for ``steps`` (default ``scene.steps``) steps."""
    steps = scene.steps if steps is None else steps
    if scene.dt > scene.stable_dt():
        warnings.warn(
            f"dt={scene.dt:g} exceeds the stability guard {scene.stable_dt():g}",
            RuntimeWarning,
            stacklevel=2,
        )
    state = apply_dirichlet(scene.initial, scene.pins, 0.0)
    n = scene.topology.n_nodes
    xs = np.empty((steps + 1, n, 3), dtype=state.x.dtype)
    vs = np.empty_like(xs)
    xs[0], vs[0] = state.x, state.v
    for k in range(steps):
        try:
            state = step_semi_implicit(state, scene, k * scene.dt)
        except SimulationError as exc:
            raise type(exc)(f"frame {k + 1}: {exc}") from exc
        xs[k + 1], vs[k + 1] = state.x, state.v
        if progress is not None:
            progress(k + 1)
    topo = scene.topology
    return Trajectory(topo.nx, topo.ny, scene.dt, topo.h, xs, vs)


def kinetic_energy(state, m):
    return 0.5 * m * float(np.sum(state.v * state.v))


def spring_energy(state, topology, E):
    """Elastic potential ``sum 1/2 E (|x_ij| - L_ij)^2`` over unordered springs."""
    i, j, rest = topology.springs()
    d = state.x[i] - state.x[j]
    r = np.sqrt(np.sum(d * d, axis=-1))
    return 0.5 * E * float(np.sum((r - rest) ** 2))
