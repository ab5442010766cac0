"""Physics-embedded network cell.

Two-tap difference kernels turn the position and velocity fields into 12
neighbour channels each (plus the raw velocity as a self channel).  Three
branches map them to a per-node velocity impulse::

    linear      sum_c wL[c] * phi_c + bL
    nonlinear   sum_c wN[c] * isru(phi_c)
    derivative  sum_c wD[c] * xi_c * isru(phi_c) + wV * v

All weights are shared by the three spatial components.  Gradients are
hand-derived (reverse mode) and checked against central differences by
:func:`finite_diff_check`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import NUM_CHANNELS, ClothState
from .physics import NonFiniteStateError, advance, plugin_impulse

__all__ = [
    "GROUPS",
    "PARAMETER_COUNT",
    "NetworkParams",
    "ChannelFeatures",
    "isru",
    "extract_channels",
    "forward_impulse",
    "backward_gradients",
    "nn_step",
    "finite_diff_check",
    "gather_channels",
]

GROUPS = ("w_k", "w_L", "b_L", "w_N", "w_D", "w_V", "alpha_isru")
GROUP_SIZES = {"w_k": 12, "w_L": 12, "b_L": 3, "w_N": 12, "w_D": 12, "w_V": 1, "alpha_isru": 1}
PARAMETER_COUNT = sum(GROUP_SIZES.values())  # 53

ORDERS = ("activate_then_multiply", "multiply_then_activate")

_DEFAULT_FROZEN = {"w_k": True, "alpha_isru": True}


def _default_frozen():
    return {g: _DEFAULT_FROZEN.get(g, False) for g in GROUPS}


@dataclass
class NetworkParams:
    """Trainable weights of the cell plus bookkeeping.

    ``frozen`` flags groups the optimizer must not touch.  ``scales`` holds
    the per-group magnitudes found by the evolutionary pre-search; the
    optimizer works in coordinates divided by these.
    """

    w_k: np.ndarray = field(default_factory=lambda: np.ones(12))
    w_L: np.ndarray = field(default_factory=lambda: np.zeros(12))
    b_L: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w_N: np.ndarray = field(default_factory=lambda: np.zeros(12))
    w_D: np.ndarray = field(default_factory=lambda: np.zeros(12))
    w_V: np.ndarray = field(default_factory=lambda: np.zeros(1))
    alpha_isru: np.ndarray = field(default_factory=lambda: np.ones(1))
    frozen: dict = field(default_factory=_default_frozen)
    scales: dict = field(default_factory=lambda: {g: 1.0 for g in GROUPS})
    derivative_order: str = "activate_then_multiply"

    def __post_init__(self):
        for g in GROUPS:
            a = np.array(getattr(self, g), dtype=np.float64).reshape(-1)
            if a.size != GROUP_SIZES[g]:
                raise ValueError(f"{g} needs {GROUP_SIZES[g]} entries, got {a.size}")
            setattr(self, g, a)
        if not self.alpha_isru[0] > 0:
            raise ValueError("alpha_isru must be positive")
        if self.derivative_order not in ORDERS:
            raise ValueError(f"derivative_order must be one of {ORDERS}")
        self.frozen = {**_default_frozen(), **dict(self.frozen)}
        self.scales = {**{g: 1.0 for g in GROUPS}, **{k: float(v) for k, v in dict(self.scales).items()}}

    @property
    def alpha(self):
        return float(self.alpha_isru[0])

    def groups(self):
        return {g: getattr(self, g) for g in GROUPS}

    def trainable(self):
        return [g for g in GROUPS if not self.frozen[g]]

    def copy(self, **changes):
        kw = {g: getattr(self, g).copy() for g in GROUPS}
        kw.update(frozen=dict(self.frozen), scales=dict(self.scales), derivative_order=self.derivative_order)
        kw.update(changes)
        return NetworkParams(**kw)

    def flat(self):
        return np.concatenate([getattr(self, g) for g in GROUPS])

    def astype(self, dtype):
        """Weights as a dict of arrays in ``dtype`` (used by reduced-precision runs)."""
        return {g: getattr(self, g).astype(dtype) for g in GROUPS}


@dataclass(frozen=True)
class ChannelFeatures:
    """``phi``/``xi``: ``(..., n, 12, 3)`` difference features; ``xi_self``: ``(..., n, 3)``."""

    phi: np.ndarray
    xi: np.ndarray
    xi_self: np.ndarray


def isru(z, alpha):
    """Inverse square root unit ``z / sqrt(1 + alpha z^2)``."""
    if np.ndim(z) == 0:
        return z / np.sqrt(1.0 + alpha * z * z)
    den = z * z
    den *= alpha
    den += 1.0
    np.sqrt(den, out=den)
    return np.divide(z, den, out=den)


def _isru_parts(z, alpha):
    inv = 1.0 / np.sqrt(1.0 + alpha * z * z)
    s = z * inv
    ds_dz = inv * inv * inv
    ds_dalpha = -0.5 * z * z * s * inv * inv
    return s, ds_dz, ds_dalpha


def raw_differences(a, topology):
    """``(..., n, 12, 3)`` array of ``a_i - a_j`` per channel, zero where ``j`` is off-grid.

    Each channel is a fixed two-tap kernel ``[+1 at center, -1 at offset]``;
    the skip channels are the same kernel at dilation 2.
    """
    lead = a.shape[:-2]
    A = a.reshape(lead + (topology.ny, topology.nx, 3))
    D = np.zeros(lead + (topology.ny, topology.nx, NUM_CHANNELS, 3), dtype=a.dtype)
    for c in range(NUM_CHANNELS):
        (cy, cx), (ny_, nx_) = topology.channel_slices(c)
        D[..., cy, cx, c, :] = A[..., cy, cx, :] - A[..., ny_, nx_, :]
    return D.reshape(lead + (topology.n_nodes, NUM_CHANNELS, 3))


def extract_channels(state, topology, w_k=None):
    """Displacement and velocity channel features of ``state``."""
    if state.x.shape[-2] != topology.n_nodes:
        raise ValueError(f"state has {state.x.shape[-2]} nodes, topology expects {topology.n_nodes}")
    w_k = np.ones(NUM_CHANNELS) if w_k is None else np.asarray(w_k)
    gain = w_k.astype(state.x.dtype)[:, None]
    return ChannelFeatures(
        gain * raw_differences(state.x, topology),
        gain * raw_differences(state.v, topology),
        state.v,
    )


def gather_channels(state, topology, w_k=None):
    """Per-node loop version of :func:`extract_channels`, kept as an independent check."""
    w_k = np.ones(NUM_CHANNELS) if w_k is None else np.asarray(w_k)
    x = state.x.reshape(-1, topology.n_nodes, 3)
    v = state.v.reshape(-1, topology.n_nodes, 3)
    phi = np.zeros(x.shape[:2] + (NUM_CHANNELS, 3))
    xi = np.zeros_like(phi)
    for b in range(x.shape[0]):
        for iy in range(topology.ny):
            for ix in range(topology.nx):
                i = iy * topology.nx + ix
                for c, (ox, oy) in enumerate(topology.offsets):
                    jx, jy = ix + ox, iy + oy
                    if 0 <= jx < topology.nx and 0 <= jy < topology.ny:
                        j = jy * topology.nx + jx
                        phi[b, i, c] = w_k[c] * (x[b, i] - x[b, j])
                        xi[b, i, c] = w_k[c] * (v[b, i] - v[b, j])
    shape = state.x.shape[:-1] + (NUM_CHANNELS, 3)
    return ChannelFeatures(phi.reshape(shape), xi.reshape(shape), state.v)


def _weights(params, dtype):
    if isinstance(params, NetworkParams):
        return {g: getattr(params, g).astype(dtype, copy=False) for g in GROUPS}, params.derivative_order
    return params, "activate_then_multiply"


def _mix(a, weights):
    """Weighted channel sum ``sum_c weights[c] * a[..., c, :]``."""
    return np.matmul(weights, a)


def _contract(a, u2):
    """``sum_{n,k} a[n, c, k] * u2[n, k]`` for every channel ``c`` as one matrix product."""
    m = u2.T @ a.reshape(len(u2), NUM_CHANNELS * 3)
    return np.einsum("kck->c", m.reshape(3, NUM_CHANNELS, 3))


def _forward(state, topology, params, diffs=None, need_cache=True):
    w, order = _weights(params, state.x.dtype)
    alpha = w["alpha_isru"][0]
    act = None
    if diffs is None:
        Dx, Dv = raw_differences(state.x, topology), raw_differences(state.v, topology)
    elif len(diffs) == 2:
        Dx, Dv = diffs
    else:
        # (Dx, Dv, alpha, isru(Dx, alpha)) lets callers reuse the activation
        Dx, Dv, act_alpha, act = diffs
        if act_alpha != alpha:
            act = None
    gain = w["w_k"][:, None]
    unit_gain = bool(np.all(w["w_k"] == 1.0))
    phi = Dx if unit_gain else gain * Dx
    xi = Dv if unit_gain else gain * Dv
    s = act if (act is not None and unit_gain) else isru(phi, alpha)
    lin = _mix(phi, w["w_L"]) + w["b_L"]
    non = _mix(s, w["w_N"])
    q_raw = None
    if order == "activate_then_multiply":
        q = xi * s
    else:
        q_raw = xi * phi
        q = isru(q_raw, alpha)
    der = _mix(q, w["w_D"]) + w["w_V"][0] * state.v
    out = lin + non + der
    if not np.isfinite(out).all():
        for name, part in (("linear", lin), ("nonlinear", non), ("derivative", der)):
            bad = np.argwhere(~np.isfinite(part))
            if len(bad):
                raise NonFiniteStateError(f"non-finite {name} branch at node {bad[0][-2]}")
    if not need_cache:
        return out, None
    cache = dict(w=w, order=order, alpha=alpha, Dx=Dx, Dv=Dv, phi=phi, xi=xi, s=s, q=q, q_raw=q_raw, v=state.v)
    return out, cache


def forward_impulse(state, topology, params):
    """Per-node 3-D velocity impulse predicted by the cell."""
    return _forward(state, topology, params, need_cache=False)[0]


def _backward(cache, upstream, groups=GROUPS):
    w = cache["w"]
    u = upstream
    phi, xi, s, q = cache["phi"], cache["xi"], cache["s"], cache["q"]
    u2 = u.reshape(-1, 3)
    contract = lambda a: _contract(a, u2)  # noqa: E731
    lead = tuple(range(u.ndim - 1))
    g = {}
    if "w_L" in groups:
        g["w_L"] = contract(phi)
    if "b_L" in groups:
        g["b_L"] = np.sum(u, axis=lead)
    if "w_N" in groups:
        g["w_N"] = contract(s)
    if "w_D" in groups:
        g["w_D"] = contract(q)
    if "w_V" in groups:
        g["w_V"] = np.array([np.sum(u * cache["v"])])
    if "w_k" in groups or "alpha_isru" in groups:
        alpha = cache["alpha"]
        _, ds, dsa = _isru_parts(phi, alpha)
        wc = lambda name: w[name][:, None]  # noqa: E731  channel weight over xyz
        d_phi = wc("w_L") + wc("w_N") * ds
        d_alpha = wc("w_N") * dsa
        if cache["order"] == "activate_then_multiply":
            d_phi = d_phi + wc("w_D") * xi * ds
            d_alpha = d_alpha + wc("w_D") * xi * dsa
            d_xi = wc("w_D") * s
        else:
            _, dq, dqa = _isru_parts(cache["q_raw"], alpha)
            d_phi = d_phi + wc("w_D") * dq * xi
            d_xi = wc("w_D") * dq * phi
            d_alpha = d_alpha + wc("w_D") * dqa
        if "w_k" in groups:
            g["w_k"] = contract(d_phi * cache["Dx"] + d_xi * cache["Dv"])
        if "alpha_isru" in groups:
            g["alpha_isru"] = np.array([np.sum(contract(d_alpha))])
    return {k: np.asarray(g.get(k, np.zeros(GROUP_SIZES[k])), dtype=np.float64).reshape(-1) for k in GROUPS}


def backward_gradients(state, topology, params, upstream, groups=GROUPS):
    """Reverse-mode gradients of ``sum(upstream * forward_impulse)``.

    Every group in ``groups`` (default: all, frozen or not) gets its exact
    gradient; the rest come back as zeros.
    """
    upstream = np.asarray(upstream)
    if upstream.shape != state.x.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match state {state.x.shape}")
    _, cache = _forward(state, topology, params)
    return _backward(cache, upstream, tuple(groups))


def forward_and_vjp(state, topology, params, diffs=None, groups=GROUPS):
    """Forward pass returning the impulse and a closure mapping cotangents to gradients."""
    out, cache = _forward(state, topology, params, diffs)
    groups = tuple(groups)
    return out, lambda upstream: _backward(cache, np.asarray(upstream), groups)


def nn_step(state, scene, params, t=0.0, impulse_fn=None, return_mask=False):
    """Advance one step with the learned impulse in place of the analytic forces.

    Plugged-in analytic forces, pins and colliders are handled exactly as in
    :func:`clothnet.physics.step_semi_implicit`.  ``impulse_fn(state)`` may
    replace the cell (used for structural-equivalence checks).
    """
    if impulse_fn is None:
        impulse = forward_impulse(state, scene.topology, params)
    else:
        impulse = impulse_fn(state)
    plug = plugin_impulse(state, scene)
    if plug is not None:
        impulse = impulse + plug
    return advance(state, impulse, scene, t, return_mask=return_mask)


def _scalar_loss(state, topology, params):
    out = forward_impulse(state, topology, params)
    return float(np.sum(out * out))


def finite_diff_check(state, topology, params, eps=1e-6, groups=None, return_details=False):
    """Worst relative error between analytic and central-difference gradients.

    The probed loss is ``sum(impulse**2)``.  Each scalar's error is
    ``|a - f| / max(|a|, |f|, 1e-6 * max|a|)`` so entries that are tiny next
    to the largest gradient are judged on that gradient's scale.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    groups = GROUPS if groups is None else tuple(groups)
    out = forward_impulse(state, topology, params)
    analytic = backward_gradients(state, topology, params, 2.0 * out)
    numeric = {}
    for g in groups:
        base = getattr(params, g)
        col = np.empty_like(base)
        for k in range(base.size):
            plus = base.copy()
            plus[k] += eps
            minus = base.copy()
            minus[k] -= eps
            fp = _scalar_loss(state, topology, params.copy(**{g: plus}))
            fm = _scalar_loss(state, topology, params.copy(**{g: minus}))
            col[k] = (fp - fm) / (2.0 * eps)
        numeric[g] = col
    a = np.concatenate([analytic[g] for g in groups])
    f = np.concatenate([numeric[g] for g in groups])
    floor = 1e-6 * np.max(np.abs(a)) if a.size else 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), max(floor, np.finfo(float).tiny))
    err = float(np.max(np.abs(a - f) / denom)) if a.size else 0.0
    if return_details:
        return err, {g: analytic[g] for g in groups}, numeric
    return err
