import io
import os
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clothnet import scene_io as sio
from clothnet.grid import ClothState, Trajectory, build_grid
from clothnet.network import GROUPS, NetworkParams
from clothnet.training import OptimizerState

MINIMAL = """
dt = 0.001
steps = 10
[grid]
nx = 4
ny = 3
h = 0.5
[material]
E = 1.0
mu = 0.1
m = 0.01
"""


def test_minimal_scene():
    scene = sio.parse_scene_config(MINIMAL)
    assert scene.topology.nx == 4 and scene.topology.ny == 3 and len(scene.pins) == 0
    assert scene.material.g == (0.0, 0.0, -9.8)


def test_bundled_scenes():
    assert set(sio.bundled_scene_names()) >= {"falling", "blown", "hanging", "ball", "bench"}
    falling = sio.bundled_scene("falling")
    n = falling.topology.nx
    iy, ix = np.divmod(falling.pins.nodes, n)
    assert len(falling.pins) == 4 * n - 4
    assert np.all((ix == 0) | (ix == n - 1) | (iy == 0) | (iy == n - 1))
    hanging = sio.bundled_scene("hanging")
    assert len(hanging.pins) == 1 and hanging.pressure_plugged
    assert 0 < abs(hanging.material.p) < 1.0
    node = hanging.pins.nodes[0]
    assert node in (0, n - 1, n * (n - 1), n * n - 1)
    assert len(sio.bundled_scene("ball").colliders) == 1
    assert sio.bundled_scene("blown").material.p > 0
    with pytest.raises(sio.SceneConfigError, match="available"):
        sio.bundled_scene("nonexistent")


@pytest.mark.parametrize("patch,field", [
    ("[[colliders]]\ncenter = [0, 0, 0]\nradius = -1.0\n", "colliders.radius"),
    ("[extra]\nx = 1\n", "extra"),
    ("[bc]\nkind = \"spiral\"\n", "bc.kind"),
    ("[pressure]\nside = 0\n", "pressure.side"),
    ("[bc]\nkind = \"corners\"\ncorners = [[1, 1]]\n", "bc.corners"),
])
def test_invalid_values_name_the_field(patch, field):
    with pytest.raises(sio.SceneConfigError, match=re.escape(field)):
        sio.parse_scene_config(MINIMAL + patch)


def test_missing_and_unknown_keys():
    with pytest.raises(sio.SceneConfigError, match="material.m: required field is missing"):
        sio.parse_scene_config(MINIMAL.replace("m = 0.01", ""))
    with pytest.raises(sio.SceneConfigError, match=r"grid.hh \(line 8\): unknown key"):
        sio.parse_scene_config(MINIMAL.replace("h = 0.5", "h = 0.5\nhh = 1"))
    with pytest.raises(sio.SceneConfigError, match=r"dt \(line 2\)"):
        sio.parse_scene_config(MINIMAL.replace("dt = 0.001", "dt = -1.0"))
    with pytest.raises(sio.SceneConfigError, match="syntax"):
        sio.parse_scene_config("dt = = 1")


def test_load_scene_from_path(tmp_path):
    p = tmp_path / "mine.toml"
    p.write_text(MINIMAL + "[bc]\nkind = \"nodes\"\nnodes = [0, 5]\n")
    scene = sio.load_scene(str(p))
    assert scene.name == "mine" and list(scene.pins.nodes) == [0, 5]


def random_traj(rng, nx, ny, frames, dtype=np.float64):
    x = rng.standard_normal((frames, nx * ny, 3)).astype(dtype)
    v = rng.standard_normal((frames, nx * ny, 3)).astype(dtype)
    return Trajectory(nx, ny, float(rng.random()), float(rng.random()), x, v)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), nx=st.integers(1, 5), ny=st.integers(1, 5), frames=st.integers(1, 4))
def test_trajectory_round_trip(seed, nx, ny, frames):
    t = random_traj(np.random.default_rng(seed), nx, ny, frames)
    buf = io.BytesIO()
    sio.write_trajectory(t, buf)
    back = sio.read_trajectory(buf.getvalue())
    assert back.x.tobytes() == t.x.tobytes() and back.v.tobytes() == t.v.tobytes()
    assert (back.nx, back.ny, back.dt, back.h) == (t.nx, t.ny, t.dt, t.h)


def test_trajectory_layout_and_f32_export():
    t = random_traj(np.random.default_rng(0), 2, 2, 3)
    buf = io.BytesIO()
    sio.write_trajectory(t, buf)
    blob = buf.getvalue()
    assert blob[:4] == b"CLT1" and len(blob) == 36 + 3 * 2 * 4 * 3 * 8
    first = np.frombuffer(blob, "<f8", count=12, offset=36).reshape(4, 3)
    assert np.array_equal(first, t.x[0])
    buf32 = io.BytesIO()
    sio.write_trajectory(t, buf32, precision="f32")
    back = sio.read_trajectory(buf32.getvalue())
    assert back.x.dtype == np.float32 and np.array_equal(back.x, t.x.astype(np.float32))


def test_large_header_declares_frames():
    header = sio.TRAJ_HEADER.pack(b"CLT1", 1, 100, 100, 5000, 0.001, 0.01)
    assert sio.TRAJ_HEADER.unpack(header)[4] == 5000
    with pytest.raises(sio.FormatError, match="expected 2400000036 bytes"):
        sio.read_trajectory(header)


def test_trajectory_rejections():
    t = random_traj(np.random.default_rng(1), 2, 2, 2)
    buf = io.BytesIO()
    sio.write_trajectory(t, buf)
    blob = buf.getvalue()
    with pytest.raises(sio.FormatError, match="expected .* got"):
        sio.read_trajectory(blob[:-10])
    with pytest.raises(sio.FormatError, match="magic"):
        sio.read_trajectory(b"XXXX" + blob[4:])
    with pytest.raises(sio.FormatError, match="version"):
        sio.read_trajectory(blob[:4] + (9).to_bytes(4, "little") + blob[8:])
    with pytest.raises(sio.FormatError, match="header"):
        sio.read_trajectory(blob[:10])


def parse_obj(text):
    verts, faces = [], []
    for line in text.splitlines():
        tag, *rest = line.split()
        if tag == "v":
            verts.append([float(t) for t in rest])
        elif tag == "f":
            faces.append([int(t) for t in rest])
    return np.array(verts), np.array(faces)


def test_obj_small_and_format():
    topo, s = build_grid(2, 2, 1.0)
    buf = io.StringIO()
    sio.export_obj(s, topo, buf)
    verts, faces = parse_obj(buf.getvalue())
    assert len(verts) == 4 and faces.tolist() == [[1, 2, 4], [1, 4, 3]]
    x = np.array([[1.5, 0.0, -2.0]] * 4)
    buf = io.StringIO()
    sio.export_obj(ClothState(x, x), topo, buf)
    assert buf.getvalue().splitlines()[0] == "v 1.5 0 -2"


def test_obj_hundred_grid_round_trip():
    topo, s = build_grid(100, 100, 0.01)
    rng = np.random.default_rng(0)
    x = s.x + rng.standard_normal(s.x.shape) * 1e-3
    buf = io.StringIO()
    sio.export_obj(x, topo, buf)
    verts, faces = parse_obj(buf.getvalue())
    assert len(verts) == 10000 and len(faces) == 19602
    assert np.array_equal(verts, x)
    assert faces.min() == 1 and faces.max() == 10000


def random_params(rng):
    p = NetworkParams(**{g: rng.standard_normal(a.size) for g, a in NetworkParams().groups().items()
                         if g != "alpha_isru"}, alpha_isru=[rng.random() + 0.1])
    return p.copy(frozen={g: bool(rng.integers(2)) for g in GROUPS},
                  scales={g: float(rng.random()) for g in GROUPS})


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), with_opt=st.booleans())
def test_checkpoint_round_trip(seed, with_opt):
    rng = np.random.default_rng(seed)
    p = random_params(rng)
    opt = None
    if with_opt:
        opt = OptimizerState({g: rng.standard_normal(a.size) for g, a in p.groups().items()},
                             {g: rng.random(a.size) for g, a in p.groups().items()}, int(rng.integers(1000)))
    history = [(k, float(rng.random()), float(rng.random()), float(rng.random()), float(rng.random()))
               for k in range(5)]
    buf = io.BytesIO()
    sio.save_checkpoint(p, buf, opt, {"step": 5, "rng": {"state": 2**100 + 7}}, history)
    ck = sio.load_checkpoint(buf.getvalue())
    assert ck.params.flat().tobytes() == p.flat().tobytes()
    assert ck.params.frozen == p.frozen and ck.params.scales == p.scales
    assert ck.history == history and ck.meta["rng"]["state"] == 2**100 + 7
    if with_opt:
        assert all(np.array_equal(ck.optimizer.m[g], opt.m[g]) and np.array_equal(ck.optimizer.v[g], opt.v[g])
                   for g in GROUPS)
        assert ck.optimizer.t == opt.t
    else:
        assert ck.optimizer is None


def test_checkpoint_rejections():
    buf = io.BytesIO()
    sio.save_checkpoint(NetworkParams(), buf)
    blob = buf.getvalue()
    bad_hash = blob[:8] + bytes(32) + blob[40:]
    with pytest.raises(sio.FormatError, match="hash"):
        sio.load_checkpoint(bad_hash)
    with pytest.raises(sio.FormatError, match="magic"):
        sio.load_checkpoint(b"CKP2" + blob[4:])
    with pytest.raises(sio.FormatError, match="version"):
        sio.load_checkpoint(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(sio.FormatError, match="size mismatch"):
        sio.load_checkpoint(blob[:-1])
    with pytest.raises(sio.FormatError, match="truncated"):
        sio.load_checkpoint(blob[:20])


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.bin"
    with pytest.raises(RuntimeError):
        with sio.atomic_output(str(target)) as fh:
            fh.write(b"partial")
            raise RuntimeError("boom")
    assert os.listdir(tmp_path) == []


def test_file_round_trip(tmp_path):
    t = random_traj(np.random.default_rng(5), 3, 2, 2)
    path = str(tmp_path / "t.clt1")
    sio.write_trajectory(t, path)
    assert np.array_equal(sio.read_trajectory(path).x, t.x)
