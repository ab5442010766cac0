"""Command-line entry point: ``clothnet <subcommand> [flags]``.

Subcommands run the pipeline stages (simulate, train, rollout, eval, bench)
plus the gradient check, OBJ export and the ``repro-desk`` chain.  Errors
print a single ``error: <context>: <message>`` line to stderr and exit 1;
usage mistakes exit 2.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation, physics, scene_io, training
from .grid import ClothState, Trajectory, build_grid
from .network import GROUP_SIZES, NetworkParams, finite_diff_check

THREADS_ENV = "CLOTHNET_THREADS"

log = logging.getLogger("clothnet")


class CommandError(Exception):
    pass


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise CommandError(f"--{name.replace('_', '-')} is required for {args.command}")


def _parse_frames(text, count):
    """``"5"``, ``"2:10"`` or ``"0:200:10"`` (Python slice semantics, end exclusive)."""
    if text is None:
        return list(range(count))
    try:
        parts = [int(p) if p else None for p in text.split(":")]
    except ValueError:
        raise CommandError(f"bad --frames value {text!r}") from None
    if len(parts) == 1:
        idx = [parts[0] if parts[0] >= 0 else count + parts[0]]
    elif len(parts) in (2, 3):
        idx = list(range(count))[slice(*parts)]
    else:
        raise CommandError(f"bad --frames value {text!r}")
    if not idx or any(not 0 <= k < count for k in idx):
        raise CommandError(f"--frames {text!r} selects no valid frame of {count}")
    return idx


def _scene(args):
    _require(args, "scene")
    return scene_io.load_scene(args.scene)


def cmd_simulate(args):
    _require(args, "out")
    scene = _scene(args)
    traj = physics.simulate_scene(scene, args.steps)
    scene_io.write_trajectory(traj, args.out, args.precision)
    print(f"wrote {len(traj)} frames to {args.out}")


def _train_config(args):
    cfg = training.TrainConfig()
    if args.config is not None:
        with open(args.config, encoding="utf-8") as fh:
            cfg = training.TrainConfig.from_dict({**cfg.to_dict(), **json.load(fh)})
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if args.steps is not None:
        overrides["epochs"] = args.steps
    if args.finetune is not None:
        overrides["finetune_epochs"] = args.finetune
    return training.TrainConfig.from_dict({**cfg.to_dict(), **overrides})


def cmd_train(args):
    _require(args, "traj", "out")
    scene = _scene(args)
    traj = scene_io.read_trajectory(args.traj)
    cfg = _train_config(args)
    resume = scene_io.load_checkpoint(args.checkpoint) if args.checkpoint else None

    def save(ck, path):
        scene_io.save_checkpoint(ck.params, path, ck.optimizer, ck.meta, ck.history)

    on_ck = None
    if cfg.checkpoint_every:
        on_ck = lambda ck: save(ck, f"{args.out}.step{ck.step}")  # noqa: E731
    ck = training.train_loop(cfg, traj, scene, resume=resume, on_checkpoint=on_ck,
                             finetune=bool(args.finetune) and resume is not None)
    if args.finetune and resume is None:
        ck = training.train_loop(cfg, traj, scene, resume=ck, on_checkpoint=on_ck, finetune=True)
    save(ck, args.out)
    history = args.history or args.out + ".loss.csv"
    with scene_io.atomic_output(history, "w") as fh:
        training.write_history_csv(ck.history, fh)
    first, last = ck.history[0][4], ck.history[-1][4]
    print(f"trained {ck.step} steps: loss {first:.6e} -> {last:.6e}; wrote {args.out} and {history}")


def cmd_rollout(args):
    _require(args, "checkpoint", "out")
    scene = _scene(args)
    ck = scene_io.load_checkpoint(args.checkpoint)
    dtype = np.float32 if args.precision == "f32" else np.float64
    traj = evaluation.rollout(ck, scene, args.steps, dtype=dtype)
    scene_io.write_trajectory(traj, args.out, args.precision)
    print(f"wrote {len(traj)} frames to {args.out}")


def cmd_eval(args):
    _require(args, "traj", "baseline")
    nn = scene_io.read_trajectory(args.traj)
    base = scene_io.read_trajectory(args.baseline)
    report = evaluation.evaluate(nn, base, scene_id=os.path.basename(args.baseline),
                                 checkpoint_id=os.path.basename(args.traj))
    if args.out:
        with scene_io.atomic_output(args.out, "w") as fh:
            report.write_csv(fh)
    print(report.summary())


def cmd_bench(args):
    scene = _scene(args)
    ck = scene_io.load_checkpoint(args.checkpoint) if args.checkpoint else NetworkParams()
    steps = args.steps or 50
    nn_sps, pbs_sps, info = evaluation.benchmark_throughput(scene, ck, steps, precision=args.precision)
    meta = " ".join(f"{k}={v}" for k, v in info.items())
    print(f"nn_steps_per_sec={nn_sps:.2f} pbs_steps_per_sec={pbs_sps:.2f} {meta}")


def random_check_case(seed, nx=5, ny=4):
    """Random jittered state and random weights used by ``gradcheck``."""
    rng = np.random.default_rng(seed)
    topo, s = build_grid(nx, ny, 0.1)
    x = s.x + 0.03 * rng.standard_normal(s.x.shape)
    v = rng.standard_normal(s.x.shape)
    params = NetworkParams(**{g: rng.uniform(-1, 1, GROUP_SIZES[g]) for g in ("w_L", "b_L", "w_N", "w_D", "w_V")},
                           w_k=rng.uniform(0.5, 1.5, 12), alpha_isru=[rng.uniform(0.5, 2.0)])
    return topo, ClothState(x, v), params


def cmd_gradcheck(args):
    topo, state, params = random_check_case(args.seed or 0)
    err = finite_diff_check(state, topo, params, eps=1e-6)
    print(f"{err:.3e}")
    if not err <= 1e-5:
        raise CommandError(f"max relative gradient error {err:.3e} exceeds 1e-5")


def cmd_export(args):
    _require(args, "traj", "out")
    traj = scene_io.read_trajectory(args.traj)
    topo, _ = build_grid(traj.nx, traj.ny, traj.h)
    frames = _parse_frames(args.frames, len(traj))
    os.makedirs(args.out, exist_ok=True)
    width = max(5, len(str(len(traj) - 1)))
    for k in frames:
        scene_io.export_obj(traj.x[k], topo, os.path.join(args.out, f"frame_{k:0{width}d}.obj"))
    print(f"wrote {len(frames)} OBJ frames to {args.out}")


def cmd_repro_desk(args):
    """Falling-scene ground truth, training, rollouts on the training and corner-hung scenes."""
    _require(args, "out")
    os.makedirs(args.out, exist_ok=True)
    path = lambda name: os.path.join(args.out, name)  # noqa: E731
    falling = scene_io.bundled_scene("falling")
    gt = physics.simulate_scene(falling)
    scene_io.write_trajectory(gt, path("falling_gt.clt1"))
    cfg = training.TrainConfig(seed=args.seed or 0, alpha=0.5 if args.alpha is None else args.alpha,
                               epochs=2000 if args.steps is None else args.steps)
    ck = training.train_loop(cfg, gt, falling)
    scene_io.save_checkpoint(ck.params, path("desk.ckp1"), ck.optimizer, ck.meta, ck.history)
    with scene_io.atomic_output(path("desk.loss.csv"), "w") as fh:
        training.write_history_csv(ck.history, fh)
    first, last = ck.history[0][4], ck.history[-1][4]
    print(f"loss ratio {last / first:.3e} ({first:.4e} -> {last:.4e})")
    for name in ("falling", "hanging"):
        scene = scene_io.bundled_scene(name)
        base = gt if name == "falling" else physics.simulate_scene(scene, 200)
        nn = evaluation.rollout(ck, scene, 200)
        base = Trajectory(base.nx, base.ny, base.dt, base.h, base.x[:201], base.v[:201])
        report = evaluation.evaluate(nn, base, scene_id=name, checkpoint_id="desk.ckp1")
        scene_io.write_trajectory(nn, path(f"{name}_nn.clt1"))
        with scene_io.atomic_output(path(f"{name}_eval.csv"), "w") as fh:
            report.write_csv(fh)
        print(report.summary())


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "export": cmd_export,
    "repro-desk": cmd_repro_desk,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="clothnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__doc__ and COMMANDS[name].__doc__.splitlines()[0])
        p.add_argument("--scene", help="scene file or bundled scene name")
        p.add_argument("--out", help="output path (directory for export and repro-desk)")
        p.add_argument("--traj", help="trajectory file to read")
        p.add_argument("--baseline", help="reference trajectory for eval")
        p.add_argument("--checkpoint", help="checkpoint to read (train: resume from it)")
        p.add_argument("--steps", type=int, help="simulation/rollout steps or optimizer steps")
        p.add_argument("--seed", type=int)
        p.add_argument("--alpha", type=float, help="physics/data loss mix")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, fixed reduction order")
        p.add_argument("--precision", choices=("f32", "f64"), default="f64")
        p.add_argument("--frames", help="frame selection for export, e.g. 10 or 0:200:20")
        p.add_argument("--threads", type=int, help=f"BLAS threads (default ${THREADS_ENV})")
        if name == "train":
            p.add_argument("--config", help="JSON file with TrainConfig fields")
            p.add_argument("--history", help="loss CSV path (default OUT.loss.csv)")
            p.add_argument("--finetune", type=int, help="cosine fine-tuning steps after (or on top of) training")
    return parser


def _thread_limit(args):
    if args.threads is not None:
        return args.threads
    if args.deterministic:
        return 1
    env = os.environ.get(THREADS_ENV)
    return int(env) if env else None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    limit = _thread_limit(args)
    ctx = threadpool_limits(limits=limit) if limit else contextlib.nullcontext()
    try:
        with ctx:
            COMMANDS[args.command](args)
    except (CommandError, OSError, ValueError, physics.SimulationError) as exc:
        print(f"error: {args.command}: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
