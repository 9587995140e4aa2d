"""Training losses: likelihood surrogate, transport and HJB regularizers.

The generative loss drives maximum likelihood through the backward
integration: the mean negative terminal log-density follows from the base
density and the trajectory's transport log|det| accumulator (no extra
differentiation). The transport term penalizes the kinetic energy of the
effective drift grad(phi) - grad(psi_mu) along the trajectory, and the HJB
term the squared optimality residual, both as Riemann sums over the
whole-step states. Gradients flow through every step, including the
attention kernel's lam and beta dependence, unless ``detach_attention``
asks for the cheaper truncated estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .datasets import StandardNormalBase
from .dynamics import (TimeGrid, Trajectory, _resolve_mu, backward_integrate,
                       generate, hjb_residual_nodes, huber_prior_grad)
from .layer import RwpoParams
from .potential import DriftPotential, bind, derivative_nodes

__all__ = [
    "LossWeights", "LossBreakdown", "nll_term", "transport_term", "hjb_term",
    "regularizer_nodes", "compose_loss", "generative_loss", "bayesian_loss",
    "bayesian_nll_node", "supervised_node",
]


@dataclass
class LossWeights:
    """Nonnegative weights of the loss components."""

    c_hjb: float = 0.1
    w_transport: float = 1.0
    w_supervised: float = 0.0

    def __post_init__(self):
        for name in ("c_hjb", "w_transport", "w_supervised"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossBreakdown:
    """Scalar loss components; ``total_node`` carries the differentiable sum."""

    nll: float
    transport: float
    hjb: float
    supervised: float
    total: float
    total_node: Node | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {"nll": self.nll, "transport": self.transport, "hjb": self.hjb,
                "supervised": self.supervised, "total": self.total}


def _mean(node: Node) -> Node:
    n = node.value.shape[0]
    return ad.mul(ad.vsum(node), 1.0 / n)


def nll_term(traj: Trajectory, base) -> Node:
    """Mean negative terminal log-density of the trajectory's data samples."""
    if not traj.tracked or traj.logdet is None:
        raise ValueError("trajectory carries no log-density accumulators")
    if traj.direction != "backward":
        raise ValueError("the likelihood surrogate needs a backward trajectory")
    x0 = traj.states[0]
    if not isinstance(x0, Node):
        x0 = ad.constant(x0)
    logdet = traj.logdet if isinstance(traj.logdet, Node) else ad.constant(traj.logdet)
    log_rho_t = ad.sub(base.log_density(x0), logdet)
    return ad.neg(_mean(log_rho_t))


def regularizer_nodes(traj: Trajectory, pot: DriftPotential, rp: RwpoParams,
                      mu=None, bound: dict | None = None):
    """Transport and HJB Riemann sums over the whole-step states.

    The M x N evaluation points are independent, so they are stacked into a
    single batched derivative pass with per-row time stamps.
    """
    tape = ad.active_tape()
    if tape is None:
        raise RuntimeError("regularizer assembly requires an active tape")
    if bound is None:
        bound = {name: ad.constant(v) for name, v in pot.tensors().items()}
    grid = traj.grid
    h = grid.h
    n = traj.values(0).shape[0]
    mu = _resolve_mu(rp, mu)
    lam_zero = not isinstance(rp.lam, Node) and float(rp.lam) == 0.0
    states = [s if isinstance(s, Node) else ad.constant(s)
              for s in traj.states[:grid.steps]]
    x_all = ad.concat_rows(states) if len(states) > 1 else states[0]
    t_all = np.repeat(grid.stamps[:grid.steps], n)
    _, gx, dt, lap = derivative_nodes(pot, bound, x_all, t_all, tape,
                                      need_laplacian=True)
    diff = gx if lam_zero else ad.sub(gx, huber_prior_grad(x_all, rp.lam, mu))
    transport = ad.mul(ad.vsum(ad.mul(diff, diff)), h / (2.0 * n))
    res = hjb_residual_nodes(gx, dt, lap, x_all, rp, mu=mu)
    hjb = ad.mul(ad.vsum(ad.mul(res, res)), h / n)
    return transport, hjb


def transport_term(traj: Trajectory, pot: DriftPotential, rp: RwpoParams,
                   mu=None, bound: dict | None = None):
    """Kinetic-energy estimate (h / 2N) sum_k sum_j |grad phi - grad psi_mu|^2."""
    if ad.active_tape() is None:
        with Tape():
            node, _ = regularizer_nodes(traj, pot, rp, mu=mu, bound=bound)
            return float(node.value)
    return regularizer_nodes(traj, pot, rp, mu=mu, bound=bound)[0]


def hjb_term(traj: Trajectory, pot: DriftPotential, rp: RwpoParams,
             mu=None, bound: dict | None = None):
    """Squared-residual estimate (h / N) sum_k sum_j |R(x_j^k, t_k)|^2."""
    if ad.active_tape() is None:
        with Tape():
            _, node = regularizer_nodes(traj, pot, rp, mu=mu, bound=bound)
            return float(node.value)
    return regularizer_nodes(traj, pot, rp, mu=mu, bound=bound)[1]


def compose_loss(nll: Node, transport: Node, hjb: Node, supervised: Node | None,
                 weights: LossWeights):
    """Weighted total with a value snapshot of every component."""
    total = ad.add(nll, ad.add(ad.mul(weights.w_transport, transport),
                               ad.mul(weights.c_hjb, hjb)))
    sup_val = 0.0
    if supervised is not None:
        total = ad.add(total, ad.mul(weights.w_supervised, supervised))
        sup_val = float(supervised.value)
    breakdown = LossBreakdown(
        nll=float(nll.value), transport=float(transport.value),
        hjb=float(hjb.value), supervised=sup_val, total=float(total.value),
        total_node=total,
    )
    return total, breakdown


def generative_loss(pot: DriftPotential, rp: RwpoParams, grid: TimeGrid,
                    data: np.ndarray, base, weights: LossWeights,
                    mu=None, bound: dict | None = None,
                    detach_attention: bool = False, attention: bool = True):
    """Backward-integrate a data batch and assemble the full training loss."""
    traj = backward_integrate(pot, rp, grid, data, bound=bound,
                              attention=attention,
                              detach_attention=detach_attention)
    nll = nll_term(traj, base)
    transport, hjb = regularizer_nodes(traj, pot, rp, mu=mu, bound=bound)
    total, breakdown = compose_loss(nll, transport, hjb, None, weights)
    return total, breakdown, traj


def _terminal_state(traj: Trajectory) -> Node:
    x = traj.states[-1]
    return x if isinstance(x, Node) else ad.constant(x)


def _apply_forward_operator(forward_op, x: Node) -> Node:
    """Forward operator applied per token; matrices stay differentiable,
    callables are linearized with a finite-difference Jacobian."""
    if isinstance(forward_op, np.ndarray):
        return ad.matmul(x, ad.constant(forward_op.T))
    vals = np.stack([np.asarray(forward_op(row), dtype=np.float64) for row in x.value])
    n, d = x.value.shape
    m = vals.shape[1]
    step = 1e-6
    jac = np.zeros((n, m, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        up = np.stack([np.asarray(forward_op(row + e), dtype=np.float64) for row in x.value])
        down = np.stack([np.asarray(forward_op(row - e), dtype=np.float64) for row in x.value])
        jac[:, :, i] = (up - down) / (2 * step)
    return ad.linearized(x, vals, jac)


def bayesian_nll_node(traj: Trajectory, y: np.ndarray, forward_op, sigma: float,
                      prior, base=None) -> Node:
    """Posterior-matching surrogate: entropy + misfit + prior terms.

    mean[ log rho_T(x_i) + |y - F(x_i)|^2 / (2 sigma^2) - log p(x_i) ]
    over the forward trajectory's terminal tokens.
    """
    if sigma <= 0:
        raise ValueError(f"noise level must be positive, got {sigma}")
    if traj.direction != "forward" or not traj.tracked:
        raise ValueError("conditional loss needs a forward trajectory with log-density tracking")
    x0 = traj.states[0]
    if not isinstance(x0, Node):
        x0 = ad.constant(x0)
    if base is None:
        base = StandardNormalBase(dim=x0.value.shape[1])
    logdet = traj.logdet if isinstance(traj.logdet, Node) else ad.constant(traj.logdet)
    log_rho_t = ad.sub(base.log_density(x0), logdet)
    xt = _terminal_state(traj)
    fx = _apply_forward_operator(forward_op, xt)
    resid = ad.sub(ad.constant(np.asarray(y, dtype=np.float64)), fx)
    misfit = ad.mul(ad.vsum(ad.mul(resid, resid), axis=1), 1.0 / (2.0 * sigma ** 2))
    log_prior = prior.log_density(xt)
    return _mean(ad.sub(ad.add(log_rho_t, misfit), log_prior))


def supervised_node(traj: Trajectory, paired_x: np.ndarray) -> Node:
    """Mean squared distance between terminal tokens and paired targets."""
    xt = _terminal_state(traj)
    diff = ad.sub(xt, ad.constant(np.asarray(paired_x, dtype=np.float64)))
    return _mean(ad.vsum(ad.mul(diff, diff), axis=1))


def bayesian_loss(traj: Trajectory, y: np.ndarray, forward_op, sigma: float,
                  prior, paired_x: np.ndarray | None = None,
                  weights: LossWeights | None = None, base=None) -> LossBreakdown:
    """Conditional-flow loss for one measurement; regularizers enter separately."""
    weights = weights or LossWeights()
    created_tape = ad.active_tape() is None
    ctx = Tape() if created_tape else _NullContext()
    with ctx:
        nll = bayesian_nll_node(traj, y, forward_op, sigma, prior, base=base)
        sup = supervised_node(traj, paired_x) if paired_x is not None else None
        zero = ad.constant(0.0)
        total, breakdown = compose_loss(nll, zero, zero, sup, weights)
    if created_tape:
        breakdown.total_node = None
    return breakdown


class _NullContext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
