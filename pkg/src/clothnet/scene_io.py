"""Scene files, the binary trajectory and checkpoint formats, and OBJ export.

Scene files are TOML::

    name = "falling"
    dt = 0.0009
    steps = 500
    plug_forces = []             # or ["pressure"]

    [grid]                       # required
    nx = 16
    ny = 16
    h = 0.0666666666666667
    origin = [0.0, 0.0, 0.0]     # optional
    plane = "xy"                 # optional

    [material]                   # required: E, mu, m
    E = 50.0
    mu = 0.05
    m = 0.002
    g = [0.0, 0.0, -9.8]
    d = 0.001

    [pressure]                   # optional
    magnitude = 0.0
    side = 1                     # +1 or -1

    [bc]                         # optional, default kind = "none"
    kind = "edges"               # none | edges | corners | nodes
    corners = [[0, -1]]          # grid (ix, iy), negative counts from the end
    nodes = []                   # node indices for kind = "nodes"
    velocity = [0.0, 0.0, 0.0]

    [initial]                    # optional
    velocity = [0.0, 0.0, 0.0]

    [[colliders]]                # optional, spheres only
    center = [0.5, 0.5, -0.3]
    radius = 0.3
    friction = 0.5

Unknown keys are rejected.  Every validation error names the field and,
where it can be found, the line.
"""

from __future__ import annotations

import io
import json
import os
import struct
import sys
import tempfile
from contextlib import contextmanager
from importlib import resources

import numpy as np

from .grid import ClothState, MaterialParams, Pins, Scene, Sphere, Trajectory, build_grid, channel_order_hash
from .network import GROUP_SIZES, GROUPS, NetworkParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "SceneConfigError",
    "FormatError",
    "parse_scene_config",
    "load_scene",
    "bundled_scene",
    "bundled_scene_names",
    "write_trajectory",
    "read_trajectory",
    "export_obj",
    "save_checkpoint",
    "load_checkpoint",
    "atomic_output",
]

TRAJ_MAGIC = b"CLT1"
TRAJ_HEADER = struct.Struct("<4sIIIIdd")
TRAJ_VERSIONS = {1: np.dtype("<f8"), 2: np.dtype("<f4")}

CKP_MAGIC = b"CKP1"
CKP_VERSION = 1
CKP_PREFIX = struct.Struct("<4sI32sI")


class SceneConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- scene files

_SCHEMA = {
    "": {"name", "dt", "steps", "plug_forces", "grid", "material", "pressure", "bc", "initial", "colliders"},
    "grid": {"nx", "ny", "h", "origin", "plane"},
    "material": {"E", "mu", "m", "g", "d"},
    "pressure": {"magnitude", "side"},
    "bc": {"kind", "corners", "nodes", "velocity"},
    "initial": {"velocity"},
    "colliders": {"kind", "center", "radius", "friction"},
}
_REQUIRED = {
    "": ("dt", "steps", "grid", "material"),
    "grid": ("nx", "ny", "h"),
    "material": ("E", "mu", "m"),
    "colliders": ("center", "radius"),
}


def _line_of(text, table, key):
    current = ""
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("["):
            current = line.strip("[]").strip()
            continue
        if current == table and line.split("=", 1)[0].strip() == key:
            return no
    return None


class _Reader:
    def __init__(self, text):
        self.text = text

    def fail(self, table, key, msg):
        field = f"{table}.{key}" if table else key
        line = _line_of(self.text, table, key)
        where = f" (line {line})" if line else ""
        raise SceneConfigError(f"{field}{where}: {msg}")

    def check_keys(self, table, data, schema_key=None):
        allowed = _SCHEMA[schema_key if schema_key is not None else table]
        for key in data:
            if key not in allowed:
                self.fail(table, key, "unknown key")
        for key in _REQUIRED.get(schema_key if schema_key is not None else table, ()):
            if key not in data:
                self.fail(table, key, "required field is missing")

    def number(self, table, data, key, default=None, lo=None, hi=None, strict_lo=False):
        if key not in data:
            return default
        val = data[key]
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.fail(table, key, f"expected a number, got {val!r}")
        val = float(val)
        if not np.isfinite(val):
            self.fail(table, key, "must be finite")
        if lo is not None and (val <= lo if strict_lo else val < lo):
            self.fail(table, key, f"must be {'>' if strict_lo else '>='} {lo:g}, got {val:g}")
        if hi is not None and val > hi:
            self.fail(table, key, f"must be <= {hi:g}, got {val:g}")
        return val

    def integer(self, table, data, key, default=None, lo=None):
        if key not in data:
            return default
        val = data[key]
        if isinstance(val, bool) or not isinstance(val, int):
            self.fail(table, key, f"expected an integer, got {val!r}")
        if lo is not None and val < lo:
            self.fail(table, key, f"must be >= {lo}, got {val}")
        return val

    def vector(self, table, data, key, default):
        if key not in data:
            return tuple(default)
        val = data[key]
        if not isinstance(val, list) or len(val) != 3 or any(
            isinstance(t, bool) or not isinstance(t, (int, float)) for t in val
        ):
            self.fail(table, key, f"expected a list of 3 numbers, got {val!r}")
        return tuple(float(t) for t in val)


def _table(r, data, key):
    val = data.get(key, {})
    if not isinstance(val, dict):
        r.fail("", key, "expected a table")
    r.check_keys(key, val)
    return val


def _pins(r, bc, topo, x0):
    kind = bc.get("kind", "none")
    velocity = r.vector("bc", bc, "velocity", (0.0, 0.0, 0.0))
    nx, ny = topo.nx, topo.ny
    if kind == "none":
        nodes = []
    elif kind == "edges":
        iy, ix = np.divmod(np.arange(topo.n_nodes), nx)
        nodes = np.nonzero((ix == 0) | (ix == nx - 1) | (iy == 0) | (iy == ny - 1))[0]
    elif kind == "corners":
        corners = bc.get("corners")
        if not isinstance(corners, list) or not corners:
            r.fail("bc", "corners", "kind = \"corners\" needs a non-empty list of [ix, iy] pairs")
        nodes = []
        for pair in corners:
            if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(t, int) for t in pair)):
                r.fail("bc", "corners", f"expected [ix, iy] integer pairs, got {pair!r}")
            ix, iy = pair[0] % nx, pair[1] % ny
            if (ix not in (0, nx - 1)) or (iy not in (0, ny - 1)):
                r.fail("bc", "corners", f"{pair!r} is not a grid corner")
            nodes.append(topo.node(ix, iy))
    elif kind == "nodes":
        nodes = bc.get("nodes", [])
        if not isinstance(nodes, list) or any(isinstance(t, bool) or not isinstance(t, int) for t in nodes):
            r.fail("bc", "nodes", "expected a list of node indices")
        if any(t < 0 or t >= topo.n_nodes for t in nodes):
            r.fail("bc", "nodes", f"node index out of range [0, {topo.n_nodes})")
    else:
        r.fail("bc", "kind", f"unknown boundary kind {kind!r}; expected none, edges, corners or nodes")
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    return Pins(nodes, x0[nodes], velocity)


def parse_scene_config(text, name=None):
    """Build a validated :class:`~clothnet.grid.Scene` from TOML text."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise SceneConfigError(f"syntax error: {exc}") from None
    r = _Reader(text)
    r.check_keys("", data)

    grid = _table(r, data, "grid")
    nx = r.integer("grid", grid, "nx", lo=2)
    ny = r.integer("grid", grid, "ny", lo=2)
    h = r.number("grid", grid, "h", lo=0.0, strict_lo=True)
    origin = r.vector("grid", grid, "origin", (0.0, 0.0, 0.0))
    plane = grid.get("plane", "xy")
    try:
        topo, state = build_grid(nx, ny, h, origin, plane)
    except ValueError as exc:
        r.fail("grid", "plane", str(exc))

    mat = _table(r, data, "material")
    pres = _table(r, data, "pressure")
    side = r.number("pressure", pres, "side", 1.0)
    if side not in (1.0, -1.0):
        r.fail("pressure", "side", f"must be +1 or -1, got {side:g}")
    material = MaterialParams(
        E=r.number("material", mat, "E", lo=0.0),
        mu=r.number("material", mat, "mu", lo=0.0),
        m=r.number("material", mat, "m", lo=0.0, strict_lo=True),
        g=r.vector("material", mat, "g", (0.0, 0.0, -9.8)),
        d=r.number("material", mat, "d", 0.0, lo=0.0),
        p=r.number("pressure", pres, "magnitude", 0.0),
    )

    init = _table(r, data, "initial")
    v0 = np.broadcast_to(np.asarray(r.vector("initial", init, "velocity", (0.0, 0.0, 0.0))), state.x.shape)
    initial = ClothState(state.x, v0.copy())
    pins = _pins(r, _table(r, data, "bc"), topo, initial.x)

    colliders = []
    raw = data.get("colliders", [])
    if not isinstance(raw, list):
        r.fail("", "colliders", "expected an array of tables ([[colliders]])")
    for c in raw:
        r.check_keys("colliders", c)
        if c.get("kind", "sphere") != "sphere":
            r.fail("colliders", "kind", f"unsupported collider {c.get('kind')!r}; only \"sphere\" exists")
        colliders.append(Sphere(
            r.vector("colliders", c, "center", (0.0, 0.0, 0.0)),
            r.number("colliders", c, "radius", lo=0.0, strict_lo=True),
            r.number("colliders", c, "friction", 0.0, lo=0.0, hi=1.0),
        ))

    plug = data.get("plug_forces", [])
    if not isinstance(plug, list) or any(p != "pressure" for p in plug):
        r.fail("", "plug_forces", f"only \"pressure\" can be plugged in, got {plug!r}")

    return Scene(
        topology=topo,
        material=material,
        initial=initial,
        dt=r.number("", data, "dt", lo=0.0, strict_lo=True),
        steps=r.integer("", data, "steps", lo=0),
        pins=pins,
        colliders=tuple(colliders),
        plug_forces=tuple(plug),
        pressure_side=side,
        name=str(data.get("name", name or "scene")),
    )


def bundled_scene_names():
    files = resources.files("clothnet") / "scenes"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".toml"))


def bundled_scene(name):
    """One of the scene files shipped with the package (``falling``, ``blown``, ...)."""
    path = resources.files("clothnet") / "scenes" / f"{name}.toml"
    if not path.is_file():
        raise SceneConfigError(f"no bundled scene {name!r}; available: {', '.join(bundled_scene_names())}")
    return parse_scene_config(path.read_text(encoding="utf-8"), name)


def load_scene(path_or_name):
    """Scene from a file path, or from a bundled scene name when no such file exists."""
    if os.path.exists(path_or_name):
        with open(path_or_name, encoding="utf-8") as fh:
            stem = os.path.splitext(os.path.basename(path_or_name))[0]
            try:
                return parse_scene_config(fh.read(), stem)
            except SceneConfigError as exc:
                raise SceneConfigError(f"{path_or_name}: {exc}") from None
    return bundled_scene(path_or_name)


# ---------------------------------------------------------------- atomic writes

@contextmanager
def atomic_output(path, mode="wb"):
    """Write to a temporary file next to ``path`` and rename it into place on success."""
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=folder)
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": ""})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@contextmanager
def _sink(target, mode):
    if isinstance(target, (str, os.PathLike)):
        with atomic_output(target, mode) as fh:
            yield fh
    else:
        yield target


def _read_all(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    return source.read()


# ---------------------------------------------------------------- trajectories

def write_trajectory(traj, sink, precision="f64"):
    """Write ``traj`` in the CLT1 layout (version 1 = f64 payload, version 2 = f32 payload)."""
    version = {"f64": 1, "f32": 2}[precision]
    dtype = TRAJ_VERSIONS[version]
    frames = len(traj)
    with _sink(sink, "wb") as fh:
        fh.write(TRAJ_HEADER.pack(TRAJ_MAGIC, version, traj.nx, traj.ny, frames, float(traj.dt), float(traj.h)))
        payload = np.stack([traj.x, traj.v], axis=1).astype(dtype, copy=False)
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_trajectory(source):
    """Read a CLT1 file; lengths are checked against the header before any array is built."""
    blob = _read_all(source)
    if len(blob) < TRAJ_HEADER.size:
        raise FormatError(f"trajectory header truncated: expected {TRAJ_HEADER.size} bytes, got {len(blob)}")
    magic, version, nx, ny, frames, dt, h = TRAJ_HEADER.unpack_from(blob)
    if magic != TRAJ_MAGIC:
        raise FormatError(f"bad trajectory magic {magic!r}, expected {TRAJ_MAGIC!r}")
    if version not in TRAJ_VERSIONS:
        raise FormatError(f"unsupported trajectory version {version}")
    dtype = TRAJ_VERSIONS[version]
    expected = TRAJ_HEADER.size + frames * 2 * nx * ny * 3 * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(f"trajectory payload size mismatch: expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype=dtype, offset=TRAJ_HEADER.size).reshape(frames, 2, nx * ny, 3)
    data = data.astype(np.float64) if version == 1 else data.astype(np.float32)
    return Trajectory(nx, ny, dt, h, data[:, 0].copy(), data[:, 1].copy())


# ---------------------------------------------------------------- OBJ

def obj_faces(topology):
    """1-based triangles, each quad split along its lower-left to upper-right diagonal."""
    nx, ny = topology.nx, topology.ny
    iy, ix = np.meshgrid(np.arange(ny - 1), np.arange(nx - 1), indexing="ij")
    a = (iy * nx + ix).reshape(-1) + 1
    b, c, d = a + 1, a + nx + 1, a + nx
    return np.stack([np.stack([a, b, c], 1), np.stack([a, c, d], 1)], 1).reshape(-1, 3)


def export_obj(state, topology, sink):
    x = np.asarray(state.x if isinstance(state, ClothState) else state)
    if x.shape != (topology.n_nodes, 3):
        raise ValueError(f"state has shape {x.shape}, expected ({topology.n_nodes}, 3)")
    lines = [f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}" for p in x.tolist()]
    lines += [f"f {a} {b} {c}" for a, b, c in obj_faces(topology).tolist()]
    text = "\n".join(lines) + "\n"
    with _sink(sink, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------- checkpoints

def _ckp_header(params, optimizer, meta, history):
    return {
        "groups": [[g, GROUP_SIZES[g]] for g in GROUPS],
        "frozen": {g: bool(params.frozen[g]) for g in GROUPS},
        "scales": {g: float(params.scales[g]) for g in GROUPS},
        "derivative_order": params.derivative_order,
        "meta": meta or {},
        "history": [list(row) for row in history or []],
        "optimizer_step": None if optimizer is None else int(optimizer.t),
    }


def save_checkpoint(params, sink, optimizer=None, meta=None, history=None):
    """Write the CKP1 layout: prefix, JSON header, f64 parameter groups, optional Adam moments."""
    header = json.dumps(_ckp_header(params, optimizer, meta, history), sort_keys=True).encode("utf-8")
    body = io.BytesIO()
    body.write(CKP_PREFIX.pack(CKP_MAGIC, CKP_VERSION, channel_order_hash(), len(header)))
    body.write(header)
    body.write(np.concatenate([getattr(params, g) for g in GROUPS]).astype("<f8").tobytes())
    if optimizer is not None:
        for moments in (optimizer.m, optimizer.v):
            body.write(np.concatenate([moments[g] for g in GROUPS]).astype("<f8").tobytes())
    with _sink(sink, "wb") as fh:
        fh.write(body.getvalue())


def load_checkpoint(source):
    """Read a CKP1 file into a :class:`~clothnet.training.Checkpoint`."""
    from .training import Checkpoint, OptimizerState

    blob = _read_all(source)
    if len(blob) < CKP_PREFIX.size:
        raise FormatError(f"checkpoint truncated: expected at least {CKP_PREFIX.size} bytes, got {len(blob)}")
    magic, version, digest, hlen = CKP_PREFIX.unpack_from(blob)
    if magic != CKP_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CKP_MAGIC!r}")
    if version != CKP_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if digest != channel_order_hash():
        raise FormatError("channel-order hash mismatch: checkpoint was written for a different stencil ordering")
    end = CKP_PREFIX.size + hlen
    if len(blob) < end:
        raise FormatError(f"checkpoint header truncated: expected {end} bytes, got {len(blob)}")
    try:
        header = json.loads(blob[CKP_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    layout = [tuple(t) for t in header.get("groups", [])]
    if layout != [(g, GROUP_SIZES[g]) for g in GROUPS]:
        raise FormatError(f"checkpoint parameter layout {layout} does not match this network")
    n = sum(GROUP_SIZES.values()) * 8
    has_opt = header.get("optimizer_step") is not None
    expected = end + n * (3 if has_opt else 1)
    if len(blob) != expected:
        raise FormatError(f"checkpoint payload size mismatch: expected {expected} bytes, got {len(blob)}")

    def split(offset):
        flat = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=offset).astype(np.float64)
        out, k = {}, 0
        for g in GROUPS:
            out[g] = flat[k:k + GROUP_SIZES[g]].copy()
            k += GROUP_SIZES[g]
        return out

    try:
        params = NetworkParams(**split(end), frozen=header["frozen"], scales=header["scales"],
                               derivative_order=header["derivative_order"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"invalid checkpoint contents: {exc}") from None
    optimizer = None
    if has_opt:
        optimizer = OptimizerState(split(end + n), split(end + 2 * n), int(header["optimizer_step"]))
    history = [tuple(row) for row in header.get("history", [])]
    return Checkpoint(params, optimizer, header.get("meta", {}), history)
