"""Hybrid physics/data training of the network cell.

Pipeline: differential-evolution pre-search over one scale per parameter
group, uniform initialisation inside the resulting brackets, then Adam on
random batches of transition pairs with a step schedule and an optional
cosine-annealed fine-tuning stage.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import ClothState
from .grid import NUM_CHANNELS
from .network import GROUPS, NetworkParams, forward_and_vjp, isru, raw_differences
from .physics import NonFiniteStateError, advance, pbs_impulse, pinned_mask, plugin_impulse

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainBatch",
    "OptimizerState",
    "Checkpoint",
    "DEResult",
    "sample_batch",
    "make_batch",
    "FeatureCache",
    "compute_loss",
    "loss_terms",
    "evaluate_loss",
    "de_preprocess",
    "adam_update",
    "schedule_lr",
    "train_loop",
    "write_history_csv",
    "DE_GROUPS",
]

DE_GROUPS = ("w_L", "b_L", "w_N", "w_D", "w_V", "alpha_isru")
HISTORY_FIELDS = ("step", "lr", "physics_loss", "data_loss", "total")


@dataclass
class TrainConfig:
    """Training settings.

    ``epochs`` counts optimizer iterations, one random batch each.  The step
    schedule drives the main stage; ``finetune_epochs > 0`` adds a
    cosine-annealed stage starting at ``finetune_lr0``.
    """

    alpha: float = 0.5
    batch_size: int = 256
    epochs: int = 2000
    lr0: float = 1e-2
    schedule: str = "step"
    gamma: float = 0.5
    interval: int = 500
    cosine_period: int = 1000
    lr_floor: float = 0.0
    finetune_epochs: int = 0
    finetune_lr0: float = 1e-3
    finetune_freeze: tuple = ()
    init: str = "uniform"
    seed: int = 0
    de_population: int = 64
    de_generations: int = 40
    de_probe_pairs: int = 64
    de_log_span: float = 3.0
    de_F: float = 0.5
    de_CR: float = 0.9
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.schedule not in ("step", "cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.init not in ("uniform", "de_best", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")
        self.finetune_freeze = tuple(self.finetune_freeze)

    def to_dict(self):
        d = asdict(self)
        d["finetune_freeze"] = list(self.finetune_freeze)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class TrainBatch:
    """Transition pairs ``k -> k+1`` with the simulator's impulse target on frame ``k``.

    ``target`` is ``f * dt / m`` with plugged-in forces left out, i.e. the
    part of the update the cell is responsible for.
    """

    scene: object
    indices: np.ndarray
    x: np.ndarray
    v: np.ndarray
    x_next: np.ndarray
    v_next: np.ndarray
    target: np.ndarray
    times: np.ndarray
    diffs: tuple | None = None

    def __len__(self):
        return len(self.indices)

    @property
    def state(self):
        return ClothState(self.x, self.v)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def fresh(cls, params):
        return cls({g: np.zeros_like(a) for g, a in params.groups().items()},
                   {g: np.zeros_like(a) for g, a in params.groups().items()}, 0)

    def copy(self):
        return OptimizerState({g: a.copy() for g, a in self.m.items()},
                              {g: a.copy() for g, a in self.v.items()}, self.t)


@dataclass
class Checkpoint:
    params: NetworkParams
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def step(self):
        return int(self.meta.get("step", 0))


@dataclass
class DEResult:
    best: np.ndarray
    best_value: float
    population: np.ndarray
    values: np.ndarray
    brackets: np.ndarray  # (dims, 2) min/max of the final population
    history: list


def make_batch(trajectory, scene, indices, features=None):
    """Batch for explicit transition indices ``k`` (pairs ``k -> k+1``).

    ``features`` is an optional :class:`FeatureCache` for the trajectory.
    """
    idx = np.asarray(indices, dtype=np.int64)
    x, v = trajectory.x[idx], trajectory.v[idx]
    if features is not None and features.targets is not None:
        target = features.targets[idx]
    else:
        target = _impulse_target(ClothState(x, v), scene)
    diffs = features.get(idx) if features is not None else None
    return TrainBatch(scene, idx, x, v, trajectory.x[idx + 1], trajectory.v[idx + 1], target, idx * scene.dt, diffs)


def _impulse_target(state, scene):
    target = pbs_impulse(state, scene, include_pressure=not scene.pressure_plugged)
    if not np.isfinite(target).all():
        raise NonFiniteStateError("non-finite force target in batch")
    return target


class FeatureCache:
    """Impulse targets and stencil differences of every frame, computed once.

    Differences are only kept when they fit in ``max_bytes``; otherwise
    batches compute their own.
    """

    def __init__(self, trajectory, scene, max_bytes=1 << 29):
        topology = scene.topology
        frames = len(trajectory) - 1
        self.targets = np.concatenate([
            _impulse_target(ClothState(trajectory.x[s:min(s + 256, frames)], trajectory.v[s:min(s + 256, frames)]), scene)
            for s in range(0, frames, 256)
        ])
        need = 2 * frames * topology.n_nodes * NUM_CHANNELS * 3 * trajectory.x.itemsize
        self.enabled = need <= max_bytes
        if self.enabled:
            self.Dx = raw_differences(trajectory.x[:-1], topology)
            self.Dv = raw_differences(trajectory.v[:-1], topology)
        self.act = None

    def set_activation(self, alpha):
        """Precompute ``isru(Dx, alpha)`` for a frozen activation parameter."""
        if self.enabled:
            self.act = (float(alpha), isru(self.Dx, float(alpha)))

    def get(self, idx):
        if not self.enabled:
            return None
        if self.act is not None:
            return self.Dx[idx], self.Dv[idx], self.act[0], self.act[1][idx]
        return self.Dx[idx], self.Dv[idx]


def sample_batch(trajectory, scene, batch_size, rng, features=None):
    """Uniformly sample ``batch_size`` distinct transitions."""
    pairs = len(trajectory) - 1
    if pairs < 1:
        raise ValueError("trajectory needs at least two frames")
    if batch_size > pairs:
        raise ValueError(f"batch_size {batch_size} exceeds the {pairs} available transition pairs")
    return make_batch(trajectory, scene, rng.choice(pairs, size=batch_size, replace=False), features)


def _loss_parts(params, batch, groups):
    scene = batch.scene
    state = batch.state
    impulse, vjp = forward_and_vjp(state, scene.topology, params, batch.diffs, groups)
    free = ~pinned_mask(impulse.shape[:-1], scene)
    w = free[..., None].astype(impulse.dtype)
    count = max(int(free.sum()), 1)

    r_p = (impulse - batch.target) * w
    physics = float(np.sum(r_p * r_p)) / (3 * count)
    up_p = 2.0 * r_p / (3 * count)

    plug = plugin_impulse(state, scene)
    total_impulse = impulse if plug is None else impulse + plug
    times = batch.times.reshape((-1,) + (1,) * (impulse.ndim - 1)) if impulse.ndim > 2 else float(batch.times[0])
    nxt, touched = advance(state, total_impulse, scene, times, return_mask=True)
    r_x = (nxt.x - batch.x_next) * w
    r_v = (nxt.v - batch.v_next) * w
    data = float(np.sum(r_x * r_x) + np.sum(r_v * r_v)) / (6 * count)
    # x' = x + v' dt, so the data residual reaches the impulse through both rows
    up_d = 2.0 * (r_v + scene.dt * r_x) * (~touched)[..., None] / (6 * count)
    return physics, data, up_p, up_d, vjp


def loss_terms(params, batch, groups=GROUPS):
    """Physics and data losses with their gradients, separately.

    Returns ``(physics, data, physics_grads, data_grads)``.  Pinned nodes are
    masked out of both terms; nodes touched by a constraint in the learned
    step get zero data gradient.
    """
    physics, data, up_p, up_d, vjp = _loss_parts(params, batch, groups)
    return physics, data, vjp(up_p), vjp(up_d)


def compute_loss(params, batch, alpha, groups=GROUPS, return_terms=False):
    """Hybrid loss ``alpha * physics + (1 - alpha) * data`` and its gradients."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    physics, data, up_p, up_d, vjp = _loss_parts(params, batch, groups)
    loss = alpha * physics + (1.0 - alpha) * data
    if not math.isfinite(loss):
        raise NonFiniteStateError(f"non-finite loss on batch {batch.indices.tolist()[:8]}")
    grads = vjp(alpha * up_p + (1.0 - alpha) * up_d)
    if return_terms:
        return loss, grads, physics, data
    return loss, grads


def evaluate_loss(params, trajectory, scene, alpha, chunk=128):
    """Hybrid loss over every transition pair of ``trajectory`` (pair-weighted mean)."""
    pairs = len(trajectory) - 1
    tot = phys = dat = 0.0
    for start in range(0, pairs, chunk):
        idx = np.arange(start, min(start + chunk, pairs))
        p, d, *_ = _loss_parts(params, make_batch(trajectory, scene, idx), ())
        phys += p * len(idx)
        dat += d * len(idx)
    phys /= pairs
    dat /= pairs
    tot = alpha * phys + (1.0 - alpha) * dat
    return tot, phys, dat


def _lattice_population(bounds, population, rng, levels=6):
    lo, hi = bounds[:, 0], bounds[:, 1]
    grid = np.linspace(0.0, 1.0, levels)
    picks = rng.integers(0, levels, size=(population, len(lo)))
    return lo + grid[picks] * (hi - lo)


def de_preprocess(objective, bounds, population=64, generations=40, rng=None, F=0.5, CR=0.9):
    """Minimise ``objective`` with DE/rand/1/bin.

    The initial population is drawn from a lattice of 6 levels per dimension.
    Mutants are clipped into ``bounds`` before crossover, so every candidate
    stays feasible.  Returns a :class:`DEResult`; ``brackets`` are the
    per-dimension ranges spanned by the final population.
    """
    rng = np.random.default_rng(rng)
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or not np.isfinite(bounds).all():
        raise ValueError("bounds must be a finite (dims, 2) array")
    if population < 4:
        raise ValueError("DE needs a population of at least 4")
    dims = len(bounds)
    pop = _lattice_population(bounds, population, rng)
    vals = np.array([objective(p) for p in pop], dtype=np.float64)
    vals[~np.isfinite(vals)] = np.inf
    history = [float(vals.min())]
    for _ in range(generations):
        for i in range(population):
            choices = [k for k in range(population) if k != i]
            r1, r2, r3 = rng.choice(choices, 3, replace=False)
            mutant = np.clip(pop[r1] + F * (pop[r2] - pop[r3]), bounds[:, 0], bounds[:, 1])
            cross = rng.random(dims) < CR
            cross[rng.integers(dims)] = True
            trial = np.where(cross, mutant, pop[i])
            f = objective(trial)
            f = f if math.isfinite(f) else np.inf
            if f <= vals[i]:
                pop[i], vals[i] = trial, f
        history.append(float(vals.min()))
    best = int(np.argmin(vals))
    brackets = np.stack([pop.min(axis=0), pop.max(axis=0)], axis=1)
    return DEResult(pop[best].copy(), float(vals[best]), pop, vals, brackets, history)


def adam_update(params, grads, opt_state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step on the unfrozen groups.

    Each group is optimised in coordinates divided by ``params.scales[group]``
    so a single learning rate fits groups of very different magnitude.
    """
    t = opt_state.t + 1
    new_m, new_v = dict(opt_state.m), dict(opt_state.v)
    changes = {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for g in params.trainable():
        scale = params.scales.get(g, 1.0)
        grad = np.asarray(grads[g], dtype=np.float64) * scale
        m = beta1 * opt_state.m[g] + (1.0 - beta1) * grad
        v = beta2 * opt_state.v[g] + (1.0 - beta2) * grad * grad
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        changes[g] = getattr(params, g) - scale * step
        new_m[g], new_v[g] = m, v
    if "alpha_isru" in changes and not changes["alpha_isru"][0] > 0:
        changes["alpha_isru"] = np.array([params.alpha_isru[0] * 0.5])
    return params.copy(**changes), OptimizerState(new_m, new_v, t)


def schedule_lr(config, step, stage="train"):
    """Learning rate at ``step`` within a stage.

    ``stage="finetune"`` always uses cosine annealing from ``finetune_lr0``.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    kind = "cosine" if stage == "finetune" else config.schedule
    lr0 = config.finetune_lr0 if stage == "finetune" else config.lr0
    if kind == "constant":
        return lr0
    if kind == "step":
        return lr0 * config.gamma ** (step // config.interval)
    period = config.cosine_period
    s = min(step, period)
    return config.lr_floor + (lr0 - config.lr_floor) * (1.0 + math.cos(math.pi * s / period)) / 2.0


# ---------------------------------------------------------------------------
# pre-search parameterisation

def _feature_scales(batch, alpha_ref=1.0):
    """Natural magnitudes used to centre the log-scale search window of each group."""
    topo = batch.scene.topology
    Dx = raw_differences(batch.x, topo)
    Dv = raw_differences(batch.v, topo)
    valid = np.any(Dx != 0, axis=-1)
    rms = lambda a: float(np.sqrt(np.mean(a * a))) or 1.0  # noqa: E731
    phi_rms = rms(Dx[valid])
    t_rms = rms(batch.target)
    mean_t = batch.target.reshape(-1, 3).mean(axis=0)
    direction = mean_t / (np.linalg.norm(mean_t) or 1.0)
    return {
        "w_L": t_rms / (12 * phi_rms),
        "b_L": t_rms,
        "w_N": t_rms / (12 * rms(isru(Dx[valid], alpha_ref / phi_rms**2))),
        "w_D": t_rms / (12 * rms(Dv[valid]) * phi_rms),
        "w_V": t_rms / rms(batch.v),
        "alpha_isru": 1.0 / phi_rms**2,
        "_bias_dir": direction,
    }


def _decode(u, refs, span):
    """Map a DE vector in ``[-1, 1]^6`` to one signed value per group."""
    out = {}
    for k, g in enumerate(DE_GROUPS):
        mag = refs[g] * 10.0 ** (span * (2.0 * abs(u[k]) - 1.0))
        out[g] = mag if g == "alpha_isru" else math.copysign(mag, u[k])
    return out


def _params_from_group_values(vals, refs, template):
    return template.copy(
        w_L=np.full(12, vals["w_L"]),
        b_L=vals["b_L"] * refs["_bias_dir"],
        w_N=np.full(12, vals["w_N"]),
        w_D=np.full(12, vals["w_D"]),
        w_V=np.array([vals["w_V"]]),
        alpha_isru=np.array([vals["alpha_isru"]]),
    )


def presearch(config, trajectory, scene, rng, template=None):
    """Run the DE stage and return ``(best params, scales, brackets, DEResult)``."""
    template = template or NetworkParams()
    pairs = len(trajectory) - 1
    probe_idx = np.sort(rng.choice(pairs, size=min(config.de_probe_pairs, pairs), replace=False))
    probe = make_batch(trajectory, scene, probe_idx)
    probe.diffs = (raw_differences(probe.x, scene.topology), raw_differences(probe.v, scene.topology))
    refs = _feature_scales(probe)

    def objective(u):
        p = _params_from_group_values(_decode(u, refs, config.de_log_span), refs, template)
        try:
            loss, _ = compute_loss(p, probe, config.alpha, groups=())
        except (NonFiniteStateError, FloatingPointError):
            return math.inf
        return loss

    bounds = np.tile([-1.0, 1.0], (len(DE_GROUPS), 1))
    with np.errstate(over="ignore", invalid="ignore"):
        res = de_preprocess(objective, bounds, config.de_population, config.de_generations, rng,
                            F=config.de_F, CR=config.de_CR)
    best_vals = _decode(res.best, refs, config.de_log_span)
    best = _params_from_group_values(best_vals, refs, template)
    brackets = {}
    for g in DE_GROUPS:
        val = best_vals[g]
        brackets[g] = (0.0, 2.0 * val) if val >= 0 else (2.0 * val, 0.0)
    scales = {g: abs(best_vals[g]) for g in DE_GROUPS}
    scales["b_L"] = abs(best_vals["b_L"])
    return best, scales, brackets, refs, res


def uniform_init(best, brackets, refs, rng):
    """Draw every weight entry uniformly from its group bracket ``sign * [0, 2*scale]``."""
    lo, hi = brackets["b_L"]
    return best.copy(
        w_L=rng.uniform(*brackets["w_L"], 12),
        b_L=rng.uniform(lo, hi) * refs["_bias_dir"] + rng.uniform(-0.5, 0.5, 3) * max(abs(lo), abs(hi)),
        w_N=rng.uniform(*brackets["w_N"], 12),
        w_D=rng.uniform(*brackets["w_D"], 12),
        w_V=np.array([rng.uniform(*brackets["w_V"])]),
    )


def _rng_state(rng):
    return json.loads(json.dumps(rng.bit_generator.state))


def _restore_rng(state):
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


def train_loop(config, trajectory, scene, resume=None, stop_after=None, on_checkpoint=None, finetune=False):
    """Train and return the final :class:`Checkpoint`.

    Without ``resume`` the DE pre-search and uniform initialisation run
    first.  ``resume`` continues from a checkpoint (same RNG stream, same
    optimizer moments).  ``finetune=True`` runs only the cosine stage on top
    of ``resume`` with ``config.finetune_freeze`` groups frozen.
    ``stop_after`` caps the number of optimizer steps taken in this call.
    """
    if len(trajectory) < 2:
        raise ValueError("trajectory needs at least two frames")
    topo = scene.topology
    if (trajectory.nx, trajectory.ny) != (topo.nx, topo.ny):
        raise ValueError("trajectory grid does not match the scene")

    if resume is None:
        if finetune:
            raise ValueError("fine-tuning needs a checkpoint to start from")
        rng = np.random.default_rng(config.seed)
        best, scales, brackets, refs, res = presearch(config, trajectory, scene, rng)
        log.info("pre-search best loss %.4e, alpha_isru %.4g", res.best_value, best.alpha)
        if config.init == "uniform":
            params = uniform_init(best, brackets, refs, rng)
        elif config.init == "zeros":
            params = NetworkParams(alpha_isru=best.alpha_isru)
        else:
            params = best
        params = params.copy(scales={**params.scales, **scales})
        ckpt = Checkpoint(
            params,
            OptimizerState.fresh(params),
            {"step": 0, "stage": "train", "rng": _rng_state(rng), "config": config.to_dict(),
             "de_best_loss": res.best_value, "brackets": {g: list(b) for g, b in brackets.items()}},
            [],
        )
    else:
        ckpt = resume

    params = ckpt.params
    opt = ckpt.optimizer.copy() if ckpt.optimizer is not None else OptimizerState.fresh(params)
    meta = dict(ckpt.meta)
    history = list(ckpt.history)
    rng = _restore_rng(meta["rng"]) if "rng" in meta else np.random.default_rng(config.seed)

    if finetune:
        if meta.get("stage") != "finetune":
            meta["stage"] = "finetune"
            meta["finetune_start"] = int(meta.get("step", 0))
            opt = OptimizerState.fresh(params)
        frozen = {g: (g in config.finetune_freeze) or params.frozen[g] for g in GROUPS}
        params = params.copy(frozen=frozen)
        total = int(meta["finetune_start"]) + config.finetune_epochs
    else:
        total = config.epochs

    step = int(meta.get("step", 0))
    taken = 0
    batch_size = min(config.batch_size, len(trajectory) - 1)
    features = FeatureCache(trajectory, scene)
    if params.frozen["alpha_isru"]:
        features.set_activation(params.alpha)
    while step < total and (stop_after is None or taken < stop_after):
        if meta.get("stage") == "finetune":
            lr = schedule_lr(config, step - int(meta["finetune_start"]), "finetune")
        else:
            lr = schedule_lr(config, step)
        batch = sample_batch(trajectory, scene, batch_size, rng, features)
        try:
            loss, grads, physics, data = compute_loss(params, batch, config.alpha, params.trainable(), True)
        except NonFiniteStateError as exc:
            raise NonFiniteStateError(f"step {step}: {exc}") from exc
        history.append((step, lr, physics, data, loss))
        params, opt = adam_update(params, grads, opt, lr)
        step += 1
        taken += 1
        meta["step"] = step
        if config.checkpoint_every and step % config.checkpoint_every == 0 and on_checkpoint is not None:
            meta["rng"] = _rng_state(rng)
            on_checkpoint(Checkpoint(params, opt.copy(), dict(meta), list(history)))

    meta["rng"] = _rng_state(rng)
    return Checkpoint(params, opt, meta, history)


def write_history_csv(history, sink):
    """Write ``(step, lr, physics_loss, data_loss, total)`` rows as CSV."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    for step, lr, p, d, t in history:
        writer.writerow([int(step), repr(float(lr)), repr(float(p)), repr(float(d)), repr(float(t))])
