"""Optimization loop: Adam with a geometric learning-rate schedule.

One iteration records a minibatch trajectory (backward for density
fitting, forward for the conditional mode), assembles the loss, runs one
reverse pass for all parameter tensors plus the raw attention parameters,
clips the global gradient norm, and applies Adam. Everything is driven by
a single seeded generator, so a config and seed reproduce the loss history
bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .datasets import StandardNormalBase
from .dynamics import TimeGrid, generate
from .exceptions import TrainingAbort
from .layer import RwpoParams, softplus_inverse, softplus_value
from .objective import (LossBreakdown, LossWeights, bayesian_nll_node,
                        compose_loss, generative_loss, regularizer_nodes,
                        supervised_node)
from .potential import DriftPotential, bind, save_checkpoint

__all__ = [
    "TrainConfig", "AdamState", "TrainResult", "ConditionalProblem",
    "lr_at", "train", "smoothed_series", "write_loss_history",
    "write_val_history", "config_to_text", "config_from_text",
]

LOSS_HISTORY_COLUMNS = ("iteration", "nll", "transport", "hjb", "supervised",
                        "total", "lambda", "beta", "lr")
VAL_HISTORY_COLUMNS = ("iteration", "nll", "transport", "hjb", "supervised", "total")


@dataclass
class TrainConfig:
    """Everything one run needs; mirrors the flat key=value config files."""

    n_iters: int = 500
    batch_size: int = 128
    lr_start: float = 1e-2
    lr_end: float = 1e-6
    c_hjb: float = 0.1
    w_transport: float = 1.0
    w_supervised: float = 0.0
    width: int = 32
    depth: int = 2
    grid_steps: int = 16
    horizon: float = 1.0
    dim: int = 2
    seed: int = 0
    lam_init: float = 2.0
    beta_init: float = 1.0
    trainable_lam: bool = True
    trainable_beta: bool = True
    dataset: str = "moons"
    mode: str = "generative"
    attention: bool = True
    detach_attention: bool = False
    huber_mu: float | None = None
    val_fraction: float = 0.1
    val_every: int = 100
    checkpoint_every: int = 500
    grad_clip: float = 100.0

    def __post_init__(self):
        if self.n_iters < 0:
            raise ValueError("n_iters must be nonnegative")
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        for name in ("batch_size", "width", "depth", "grid_steps", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("generative", "bayesian"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def weights(self) -> LossWeights:
        return LossWeights(c_hjb=self.c_hjb, w_transport=self.w_transport,
                           w_supervised=self.w_supervised)

    def grid(self) -> TimeGrid:
        return TimeGrid(steps=self.grid_steps, horizon=self.horizon)


@dataclass
class AdamState:
    """First/second moment accumulators per named parameter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def update(self, name: str, value: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if name not in self.m:
            self.m[name] = np.zeros_like(value)
            self.v[name] = np.zeros_like(value)
        m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
        v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad ** 2
        mhat = m / (1 - self.beta1 ** self.step)
        vhat = v / (1 - self.beta2 ** self.step)
        return value - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class ConditionalProblem:
    """One-measurement conditional target for the bayesian mode."""

    y: np.ndarray
    forward_op: object
    sigma: float
    prior: object
    dim: int
    paired_x: np.ndarray | None = None


@dataclass
class TrainResult:
    potential: DriftPotential
    rwpo: RwpoParams
    history: list[dict]
    val_history: list[dict]
    config: TrainConfig


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Geometric interpolation from lr_start to lr_end across the run."""
    if not (0 <= iteration < config.n_iters):
        raise ValueError(f"iteration {iteration} outside [0, {config.n_iters})")
    if config.n_iters == 1:
        return config.lr_start
    frac = iteration / (config.n_iters - 1)
    return config.lr_start * (config.lr_end / config.lr_start) ** frac


def _clip_gradients(grads: dict, limit: float) -> dict:
    total = np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
    if limit > 0 and total > limit:
        scale = limit / total
        return {k: g * scale for k, g in grads.items()}
    return grads


def _effective_params(config: TrainConfig, raw_lam, raw_beta) -> tuple[float, float]:
    lam = softplus_value(raw_lam) if config.trainable_lam else config.lam_init
    beta = softplus_value(raw_beta) if config.trainable_beta else config.beta_init
    return lam, beta


def train(config: TrainConfig, data, out_dir=None,
          potential: DriftPotential | None = None) -> TrainResult:
    """Run the optimization loop.

    ``data`` is an (n, d) sample matrix in generative mode or a
    ConditionalProblem in bayesian mode. A non-finite loss aborts with the
    iteration index and the term breakdown.
    """
    rng = np.random.default_rng(config.seed)
    grid = config.grid()
    weights = config.weights()
    base = StandardNormalBase(dim=config.dim)

    if config.mode == "generative":
        data = np.asarray(data, dtype=np.float64)
        if data.shape[0] < 1:
            raise ValueError("empty dataset")
        perm = rng.permutation(data.shape[0])
        n_val = int(config.val_fraction * data.shape[0])
        val_set = data[perm[:n_val]]
        train_set = data[perm[n_val:]]
    else:
        if not isinstance(data, ConditionalProblem):
            raise ValueError("bayesian mode expects a ConditionalProblem")
        problem = data
        val_x0 = rng.normal(size=(config.batch_size, config.dim))

    pot = potential if potential is not None else DriftPotential.initialize(
        dim=config.dim, width=config.width, depth=config.depth, seed=config.seed)
    raw_lam = softplus_inverse(config.lam_init) if config.trainable_lam else None
    raw_beta = softplus_inverse(config.beta_init) if config.trainable_beta else None

    adam = AdamState()
    history: list[dict] = []
    val_history: list[dict] = []

    def current_rp(lam_node=None, beta_node=None) -> RwpoParams:
        lam_val, beta_val = _effective_params(config, raw_lam, raw_beta)
        return RwpoParams(lam=lam_node if lam_node is not None else lam_val,
                          beta=beta_node if beta_node is not None else beta_val,
                          h=grid.h, trainable_lam=config.trainable_lam,
                          trainable_beta=config.trainable_beta)

    def evaluate_loss(batch_or_x0, record: bool):
        """One loss assembly; returns (breakdown, grads or None)."""
        with Tape() as tape:
            bound = bind(pot)
            leaves = dict(bound)
            lam_node = beta_node = None
            if config.trainable_lam:
                lam_leaf = ad.leaf(raw_lam)
                leaves["raw_lam"] = lam_leaf
                lam_node = ad.softplus(lam_leaf)
            if config.trainable_beta:
                beta_leaf = ad.leaf(raw_beta)
                leaves["raw_beta"] = beta_leaf
                beta_node = ad.softplus(beta_leaf)
            rp = current_rp(lam_node, beta_node)
            if config.mode == "generative":
                total, breakdown, _ = generative_loss(
                    pot, rp, grid, batch_or_x0, base, weights, mu=config.huber_mu,
                    bound=bound, detach_attention=config.detach_attention,
                    attention=config.attention)
            else:
                traj = generate(pot, rp, grid, batch_or_x0, bound=bound,
                                track_logdensity=True, attention=config.attention,
                                detach_attention=config.detach_attention)
                nll = bayesian_nll_node(traj, problem.y, problem.forward_op,
                                        problem.sigma, problem.prior, base=base)
                transport, hjb = regularizer_nodes(traj, pot, rp,
                                                   mu=config.huber_mu, bound=bound)
                sup = (supervised_node(traj, problem.paired_x)
                       if problem.paired_x is not None else None)
                total, breakdown = compose_loss(nll, transport, hjb, sup, weights)
            if not record:
                return breakdown, None
            names = sorted(leaves)
            values = ad.grad(tape, total, [leaves[n] for n in names])
        return breakdown, dict(zip(names, values))

    for it in range(config.n_iters):
        if config.mode == "generative":
            idx = rng.integers(0, train_set.shape[0], size=min(config.batch_size,
                                                               train_set.shape[0]))
            batch = train_set[idx]
        else:
            batch = rng.normal(size=(config.batch_size, config.dim))

        breakdown, grads = evaluate_loss(batch, record=True)
        if not np.isfinite(breakdown.total):
            raise TrainingAbort(
                f"non-finite loss at iteration {it}: {breakdown.as_dict()}",
                iteration=it, breakdown=breakdown)
        grads = _clip_gradients(grads, config.grad_clip)

        lr = lr_at(it, config)
        adam.step += 1
        for name, g in grads.items():
            if name == "raw_lam":
                raw_lam = float(adam.update(name, np.asarray(raw_lam), g, lr))
            elif name == "raw_beta":
                raw_beta = float(adam.update(name, np.asarray(raw_beta), g, lr))
            else:
                pot.set_tensor(name, adam.update(name, pot.tensors()[name], g, lr))

        lam_val, beta_val = _effective_params(config, raw_lam, raw_beta)
        history.append({"iteration": it, **breakdown.as_dict(),
                        "lambda": lam_val, "beta": beta_val, "lr": lr})

        if config.val_every > 0 and (it % config.val_every == 0 or it == config.n_iters - 1):
            val_batch = val_set if config.mode == "generative" else val_x0
            if config.mode == "generative" and val_set.shape[0] == 0:
                val_batch = batch
            val_bd, _ = evaluate_loss(val_batch, record=False)
            val_history.append({"iteration": it, **val_bd.as_dict()})

        if out_dir is not None and config.checkpoint_every > 0 and (
                (it + 1) % config.checkpoint_every == 0 or it == config.n_iters - 1):
            lam_val, beta_val = _effective_params(config, raw_lam, raw_beta)
            save_checkpoint(f"{out_dir}/checkpoint.npz", pot,
                            extra={"lam": lam_val, "beta": beta_val,
                                   "horizon": config.horizon,
                                   "grid_steps": config.grid_steps,
                                   "attention": float(config.attention)})

    return TrainResult(potential=pot, rwpo=current_rp(), history=history,
                       val_history=val_history, config=config)


def smoothed_series(values, window: int = 50) -> np.ndarray:
    """Trailing moving average with a warm-up-sized head."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out[i] = values[lo:i + 1].mean()
    return out


def write_loss_history(path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOSS_HISTORY_COLUMNS) + "\n")
        for row in history:
            fh.write(",".join(_fmt(row[c]) for c in LOSS_HISTORY_COLUMNS) + "\n")


def write_val_history(path, val_history: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(VAL_HISTORY_COLUMNS) + "\n")
        for row in val_history:
            fh.write(",".join(_fmt(row[c]) for c in VAL_HISTORY_COLUMNS) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def config_to_text(config: TrainConfig) -> str:
    lines = ["# resolved training configuration"]
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        lines.append(f"{f.name}={'' if value is None else value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, overrides: dict | None = None) -> TrainConfig:
    """Parse flat key=value lines (# comments allowed) into a TrainConfig."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    values.update(overrides or {})
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in values:
            continue
        raw_val = values.pop(f.name)
        kwargs[f.name] = _coerce(f, raw_val)
    if values:
        raise ValueError(f"unknown config keys: {', '.join(sorted(values))}")
    return TrainConfig(**kwargs)


def _coerce(f, raw):
    if not isinstance(raw, str):
        return raw
    if raw == "" or raw.lower() == "none":
        return None
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if f.type in ("bool", bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if f.type in ("float | None",):
        return float(raw)
    return raw
