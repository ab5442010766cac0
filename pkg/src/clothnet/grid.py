"""Grid construction, the 13-point stencil, and the shared cloth data model.

Nodes of an ``nx`` by ``ny`` grid are indexed row-major with ``ix`` fastest,
``node = iy * nx + ix``.  Every node talks to (at most) 12 neighbours through
the stencil channels returned by :func:`stencil_offsets`; the channel order
is fixed forever because checkpoints and feature tensors depend on it::

    0-3   cardinal  E  N  W  S        rest length h
    4-7   diagonal  NE NW SW SE       rest length h*sqrt(2)
    8-11  skip      E2 N2 W2 S2       rest length 2h

Relative displacements are always *center minus neighbour*,
``x_ij = x_i - x_j``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CHANNEL_NAMES",
    "NUM_CHANNELS",
    "ClothState",
    "GridTopology",
    "MaterialParams",
    "Pins",
    "Sphere",
    "Scene",
    "Trajectory",
    "build_grid",
    "channel_order_hash",
    "negated_channel",
    "stencil_offsets",
]

CHANNEL_NAMES = ("E", "N", "W", "S", "NE", "NW", "SW", "SE", "E2", "N2", "W2", "S2")
NUM_CHANNELS = 12

_OFFSETS = np.array(
    [
        (1, 0), (0, 1), (-1, 0), (0, -1),
        (1, 1), (-1, 1), (-1, -1), (1, -1),
        (2, 0), (0, 2), (-2, 0), (0, -2),
    ],
    dtype=np.int64,
)
_MULTIPLIERS = np.array([1.0] * 4 + [np.sqrt(2.0)] * 4 + [2.0] * 4)

_PLANES = {
    "xy": (0, 1),
    "yx": (1, 0),
    "xz": (0, 2),
    "zx": (2, 0),
    "yz": (1, 2),
    "zy": (2, 1),
}


def stencil_offsets():
    """Return the 12 ``((dx, dy), rest_length_multiplier)`` pairs in channel order."""
    return [((int(o[0]), int(o[1])), float(m)) for o, m in zip(_OFFSETS, _MULTIPLIERS)]


def negated_channel(c):
    """Channel whose offset is the negation of channel ``c``'s offset."""
    return (c // 4) * 4 + (c % 4 + 2) % 4


def channel_order_hash():
    """SHA-256 digest of the canonical channel ordering (32 bytes)."""
    text = ";".join(f"{n}:{o[0]},{o[1]}:{m!r}" for n, (o, m) in zip(CHANNEL_NAMES, stencil_offsets()))
    return hashlib.sha256(text.encode("ascii")).digest()


@dataclass(frozen=True)
class ClothState:
    """Positions and velocities of every node.

    Arrays have shape ``(..., n_nodes, 3)``; leading axes (if any) index a
    batch of states on the same grid.
    """

    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x)
        v = np.asarray(self.v)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float64)
        if v.dtype != x.dtype:
            v = v.astype(x.dtype)
        if x.shape != v.shape or x.ndim < 2 or x.shape[-1] != 3:
            raise ValueError(f"x and v must share a (..., n, 3) shape, got {x.shape} and {v.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def n_nodes(self):
        return self.x.shape[-2]

    def astype(self, dtype):
        return ClothState(self.x.astype(dtype), self.v.astype(dtype))

    def is_finite(self):
        return bool(np.isfinite(self.x).all() and np.isfinite(self.v).all())


@dataclass(frozen=True, eq=False)
class GridTopology:
    """Stencil connectivity of a regular ``nx`` by ``ny`` grid with spacing ``h``."""

    nx: int
    ny: int
    h: float
    offsets: np.ndarray = field(repr=False)
    rest: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    neighbor: np.ndarray = field(repr=False)

    @property
    def n_nodes(self):
        return self.nx * self.ny

    def node(self, ix, iy):
        return iy * self.nx + ix

    def channel_slices(self, c):
        """2-D slices ``(center, neighbour)`` into an ``(ny, nx, ...)`` array.

        ``arr[center] - arr[neighbour]`` is the channel-``c`` difference for every
        node whose neighbour lies on the grid.
        """
        ox, oy = (int(t) for t in self.offsets[c])
        cx = slice(max(0, -ox), self.nx - max(0, ox))
        cy = slice(max(0, -oy), self.ny - max(0, oy))
        nxs = slice(cx.start + ox, cx.stop + ox)
        nys = slice(cy.start + oy, cy.stop + oy)
        return (cy, cx), (nys, nxs)

    def springs(self, channels=None):
        """Unordered spring list ``(i, j, rest_length)`` with ``i < j`` each counted once."""
        chans = range(NUM_CHANNELS) if channels is None else channels
        ii, jj, ll = [], [], []
        for c in chans:
            idx = np.nonzero(self.mask[:, c])[0]
            nb = self.neighbor[idx, c]
            keep = idx < nb
            ii.append(idx[keep])
            jj.append(nb[keep])
            ll.append(np.full(int(keep.sum()), self.rest[c]))
        return np.concatenate(ii), np.concatenate(jj), np.concatenate(ll)

    def spring_count(self):
        return int(self.mask.sum()) // 2

    def max_node_degree(self):
        return int(self.mask.sum(axis=1).max())


@dataclass(frozen=True)
class MaterialParams:
    """Spring stiffness ``E``, spring damping ``mu``, nodal mass ``m``, gravity ``g``,
    air drag ``d`` and pressure magnitude ``p`` (force per node)."""

    E: float
    mu: float
    m: float
    g: tuple = (0.0, 0.0, -9.8)
    d: float = 0.0
    p: float = 0.0

    def __post_init__(self):
        if self.E < 0 or self.mu < 0 or self.d < 0:
            raise ValueError("E, mu and d must be non-negative")
        if not self.m > 0:
            raise ValueError("nodal mass must be positive")
        object.__setattr__(self, "g", tuple(float(t) for t in self.g))
        if len(self.g) != 3:
            raise ValueError("gravity must be a 3-vector")


@dataclass(frozen=True, eq=False)
class Pins:
    """Dirichlet pins: node indices held on ``anchor + velocity * t``."""

    nodes: np.ndarray
    anchors: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1)
        anchors = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 3)
        if len(nodes) != len(anchors):
            raise ValueError("one anchor per pinned node required")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=np.float64).reshape(3))

    @classmethod
    def static(cls, nodes, x0):
        nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
        return cls(nodes, np.asarray(x0)[nodes])

    @classmethod
    def none(cls):
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)))

    @property
    def moving(self):
        return bool(np.any(self.velocity != 0))

    def __len__(self):
        return len(self.nodes)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    friction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(t) for t in self.center))
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        if not 0.0 <= self.friction <= 1.0:
            raise ValueError("sphere friction must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class Scene:
    """Everything needed to simulate one setup.

    ``pressure_side`` (+1 or -1) selects which side of the initial sheet the
    pressure pushes towards; ``plug_forces`` lists the analytic forces applied
    outside the learned cell (currently only ``"pressure"``).
    """

    topology: GridTopology
    material: MaterialParams
    initial: ClothState
    dt: float
    steps: int
    pins: Pins = field(default_factory=Pins.none)
    colliders: tuple = ()
    plug_forces: tuple = ()
    pressure_side: float = 1.0
    name: str = "scene"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        n = self.topology.n_nodes
        if len(self.pins) and (self.pins.nodes.min() < 0 or self.pins.nodes.max() >= n):
            raise ValueError("pinned node index out of range")
        if self.initial.x.shape != (n, 3):
            raise ValueError("initial state does not match the grid")
        object.__setattr__(self, "colliders", tuple(self.colliders))
        object.__setattr__(self, "plug_forces", tuple(self.plug_forces))

    @property
    def pressure_plugged(self):
        return "pressure" in self.plug_forces

    def stable_dt(self):
        """Conservative explicit time step ``0.5*sqrt(m / (E * max degree))``."""
        k_row = self.material.E * self.topology.max_node_degree()
        if k_row == 0:
            return float("inf")
        return 0.5 * float(np.sqrt(self.material.m / k_row))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Frames of a simulation stored as stacked ``(frames, n, 3)`` arrays."""

    nx: int
    ny: int
    dt: float
    h: float
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x)
        v = np.asarray(self.v)
        if x.ndim != 3 or x.shape != v.shape or x.shape[1:] != (self.nx * self.ny, 3):
            raise ValueError(f"trajectory arrays must be (frames, {self.nx * self.ny}, 3)")
        if x.shape[0] < 1:
            raise ValueError("a trajectory needs at least one frame")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_frames(cls, frames, nx, ny, dt, h):
        return cls(nx, ny, dt, h, np.stack([f.x for f in frames]), np.stack([f.v for f in frames]))

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, k):
        return ClothState(self.x[k], self.v[k])

    @property
    def frames(self):
        return [self[k] for k in range(len(self))]


def build_grid(nx, ny, h, origin=(0.0, 0.0, 0.0), plane="xy"):
    """Regular grid of ``nx * ny`` nodes at rest, plus its stencil topology.

    Node ``(ix, iy)`` sits at ``origin + ix*h*e_a + iy*h*e_b`` where ``plane``
    names the axis pair ``(a, b)``.
    """
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise ValueError(f"grid needs nx >= 2 and ny >= 2, got {nx}x{ny}")
    if not h > 0:
        raise ValueError(f"grid spacing must be positive, got {h}")
    if plane not in _PLANES:
        raise ValueError(f"unknown plane {plane!r}; expected one of {sorted(_PLANES)}")
    nx, ny, h = int(nx), int(ny), float(h)

    iy, ix = np.divmod(np.arange(nx * ny), nx)
    a, b = _PLANES[plane]
    x = np.tile(np.asarray(origin, dtype=np.float64), (nx * ny, 1))
    x[:, a] += ix * h
    x[:, b] += iy * h

    jx = ix[:, None] + _OFFSETS[None, :, 0]
    jy = iy[:, None] + _OFFSETS[None, :, 1]
    mask = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny)
    neighbor = np.where(mask, jy * nx + jx, -1)

    topo = GridTopology(nx, ny, h, _OFFSETS.copy(), _MULTIPLIERS * h, mask, neighbor)
    return topo, ClothState(x, np.zeros_like(x))
