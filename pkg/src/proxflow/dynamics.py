"""Time integration of the token flow with log-density accounting.

Forward generation alternates a drift half-step with the prox-attention
layer; backward (training) integration applies the inverse attention move
first and then the reverse drift half-step at the midpoint time stamp.
Both directions accumulate, per token, a first-order estimate of
log|det| of the forward transport map: each applied displacement map
x -> x + D(x) contributes the trace of dD/dx at the pre-step state (the
drift step contributes h * laplacian(phi), the attention step the layer's
displacement divergence). Terminal log-densities then follow from the
change of variables log rho_T(x^M) = log rho_0(x^0) - logdet.

The backward attention move subtracts the layer displacement, so a
generate / backward round trip returns the initial tokens to O(h) and the
two accumulators agree to O(h^2) per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .exceptions import NumericsError
from .layer import (RwpoParams, TokenBatch, attention_displacement,
                    attention_step_pieces, sparse_attention_divergence)
from .potential import DriftPotential, derivative_nodes

__all__ = [
    "TimeGrid", "Trajectory", "generate", "backward_integrate",
    "huber_prior_grad", "huber_prior_laplacian", "hjb_residual",
    "hjb_residual_nodes", "export_trajectory_csv", "FlowDivergence",
]


class FlowDivergence(NumericsError):
    """Tokens or accumulators became non-finite; carries the step index."""

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass
class TimeGrid:
    """Uniform stamps t_k = k * h covering [0, horizon] in ``steps`` steps."""

    steps: int
    horizon: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"need at least one step, got {self.steps}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    @property
    def stamps(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.h


@dataclass
class Trajectory:
    """Whole-step states plus the per-token transport log|det| estimate."""

    states: list
    logdet: object
    logdet_steps: list
    direction: str
    grid: TimeGrid
    tracked: bool = True

    def values(self, k: int) -> np.ndarray:
        s = self.states[k]
        return s.value if isinstance(s, Node) else s

    @property
    def logdet_values(self) -> np.ndarray:
        return self.logdet.value if isinstance(self.logdet, Node) else self.logdet

    @property
    def batches(self) -> list[TokenBatch]:
        return [TokenBatch(points=self.values(k), time_index=k)
                for k in range(len(self.states))]


def _as_points(x0) -> np.ndarray:
    if isinstance(x0, TokenBatch):
        return x0.points
    if isinstance(x0, Node):
        return x0.value
    return np.asarray(x0, dtype=np.float64)


def _check_grid(rp: RwpoParams, grid: TimeGrid) -> None:
    if not np.isclose(rp.h, grid.h, rtol=1e-12):
        raise ValueError(f"attention step size {rp.h} does not match grid step {grid.h}")


def _finite_or_raise(arr: np.ndarray, what: str, step: int) -> None:
    if not np.isfinite(arr).all():
        raise FlowDivergence(f"non-finite {what}", step)


def generate(pot: DriftPotential, rp: RwpoParams, grid: TimeGrid, x0, *,
             bound: dict | None = None, track_logdensity: bool = False,
             attention: bool = True, detach_attention: bool = False) -> Trajectory:
    """Run the forward flow from base samples x0 over the whole grid.

    With an active tape (and a ``bound`` parameter dict) every step stays
    on the recorded graph; otherwise each step runs on its own throwaway
    tape and only values are kept.
    """
    if attention:
        _check_grid(rp, grid)
    recording = ad.active_tape() is not None
    if bound is None:
        bound = {name: ad.constant(v) for name, v in pot.tensors().items()}
    x = x0 if (recording and isinstance(x0, Node)) else ad.constant(_as_points(x0))
    n = x.value.shape[0]
    h = grid.h
    states = [x]
    logdet = ad.constant(np.zeros(n)) if recording else np.zeros(n)
    logdet_steps = [np.zeros(n)]
    for k in range(grid.steps):
        t_k = grid.stamps[k]
        try:
            if recording:
                x, logdet = _forward_step(pot, bound, rp, x, t_k, h, logdet,
                                          track_logdensity, attention,
                                          detach_attention, k)
            else:
                with Tape():
                    xn, ln = _forward_step(pot, bound, rp, x, t_k, h,
                                           ad.constant(logdet), track_logdensity,
                                           attention, detach_attention, k)
                    x, logdet = ad.constant(xn.value.copy()), ln.value.copy()
        except FlowDivergence:
            raise
        except NumericsError as err:
            raise FlowDivergence(str(err), k) from err
        states.append(x)
        logdet_steps.append(logdet.value.copy() if isinstance(logdet, Node) else logdet.copy())
    return Trajectory(states=states, logdet=logdet, logdet_steps=logdet_steps,
                      direction="forward", grid=grid, tracked=track_logdensity)


def _forward_step(pot, bound, rp, x, t_k, h, logdet, track, attention, detach, k):
    tape = ad.active_tape()
    _, gx, _, lap = derivative_nodes(pot, bound, x, t_k, tape,
                                     need_laplacian=track)
    xh = ad.add(x, ad.mul(h, gx))
    _finite_or_raise(xh.value, "tokens", k)
    if track:
        logdet = ad.add(logdet, ad.mul(h, lap))
    if attention:
        if track:
            disp, div = attention_step_pieces(xh, rp)
            if detach:
                div = ad.constant(div.value)
            logdet = ad.add(logdet, div)
        else:
            disp = attention_displacement(xh, rp)
        if detach:
            disp = ad.constant(disp.value)
        xh = ad.add(xh, disp)
    _finite_or_raise(xh.value, "tokens", k)
    if track:
        _finite_or_raise(logdet.value, "log-density accumulator", k)
    return xh, logdet


def backward_integrate(pot: DriftPotential, rp: RwpoParams, grid: TimeGrid, x_terminal, *,
                       bound: dict | None = None, attention: bool = True,
                       detach_attention: bool = False) -> Trajectory:
    """Integrate the flow backward from data samples, tracking log-densities.

    For k = M..1: undo the attention move at x^k, then apply the reverse
    drift step at the midpoint stamp t_{k-1/2}. The attention divergence is
    evaluated at the pre-step state x^k and the drift laplacian at the
    midpoint state, accumulating the same forward-transport log|det|
    estimate that ``generate`` tracks.
    """
    if attention:
        _check_grid(rp, grid)
    recording = ad.active_tape() is not None
    if bound is None:
        bound = {name: ad.constant(v) for name, v in pot.tensors().items()}
    x = x_terminal if (recording and isinstance(x_terminal, Node)) else ad.constant(_as_points(x_terminal))
    n = x.value.shape[0]
    h = grid.h
    states = [x]
    logdet = ad.constant(np.zeros(n)) if recording else np.zeros(n)
    logdet_steps = [np.zeros(n)]
    for k in range(grid.steps, 0, -1):
        t_mid = (k - 0.5) * h
        try:
            if recording:
                x, logdet = _backward_step(pot, bound, rp, x, t_mid, h, logdet,
                                           attention, detach_attention, k)
            else:
                with Tape():
                    xn, ln = _backward_step(pot, bound, rp, x, t_mid, h,
                                            ad.constant(logdet), attention,
                                            detach_attention, k)
                    x, logdet = ad.constant(xn.value.copy()), ln.value.copy()
        except FlowDivergence:
            raise
        except NumericsError as err:
            raise FlowDivergence(str(err), k) from err
        states.append(x)
        logdet_steps.append(logdet.value.copy() if isinstance(logdet, Node) else logdet.copy())
    states.reverse()
    logdet_steps.reverse()
    return Trajectory(states=states, logdet=logdet, logdet_steps=logdet_steps,
                      direction="backward", grid=grid)


def _backward_step(pot, bound, rp, x, t_mid, h, logdet, attention, detach, k):
    tape = ad.active_tape()
    if attention:
        disp, div = attention_step_pieces(x, rp)
        if detach:
            div = ad.constant(div.value)
            disp = ad.constant(disp.value)
        logdet = ad.add(logdet, div)
        xh = ad.sub(x, disp)
    else:
        xh = x
    _, gx, _, lap = derivative_nodes(pot, bound, xh, t_mid, tape,
                                     need_laplacian=True)
    xn = ad.sub(xh, ad.mul(h, gx))
    logdet = ad.add(logdet, ad.mul(h, lap))
    _finite_or_raise(xn.value, "tokens", k)
    _finite_or_raise(logdet.value, "log-density accumulator", k)
    return xn, logdet


# ---------------------------------------------------------------------------
# smoothed prior derivatives and the HJB residual


def huber_prior_grad(x, lam, mu):
    """Gradient of the Huber-smoothed L1 prior: lam * clamp(x_i / mu, -1, 1)."""
    if not isinstance(lam, Node) and float(lam) == 0.0:
        if isinstance(x, Node):
            return ad.constant(np.zeros(x.shape))
        return np.zeros(np.asarray(x).shape)
    plain = not isinstance(x, Node) and not isinstance(lam, Node)
    xn = x if isinstance(x, Node) else ad.constant(x)
    out = ad.mul(lam, ad.clip(ad.div(xn, mu), -1.0, 1.0))
    return out.value if plain else out


def huber_prior_laplacian(x, lam, mu):
    """Laplacian of the Huber-smoothed prior: (lam/mu) * #{i : |x_i| <= mu}."""
    xv = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    if not isinstance(lam, Node) and float(lam) == 0.0:
        counts = np.zeros(xv.shape[0]) if xv.ndim == 2 else 0.0
        return ad.constant(counts) if isinstance(x, Node) else counts
    mu_val = float(mu.value) if isinstance(mu, Node) else float(mu)
    counts = (np.abs(xv) <= mu_val).sum(axis=-1).astype(np.float64)
    plain = not isinstance(x, Node) and not isinstance(lam, Node)
    out = ad.mul(ad.div(lam, mu), ad.constant(counts))
    return out.value if plain else out


def _resolve_mu(rp: RwpoParams, mu):
    """Default smoothing width ties to the prox scale: mu = h * lam."""
    lam_zero = not isinstance(rp.lam, Node) and float(rp.lam) == 0.0
    if mu is not None:
        if not isinstance(mu, Node) and float(mu) <= 0 and not lam_zero:
            raise ValueError(f"huber width must be positive, got {mu}")
        return mu
    if isinstance(rp.lam, Node):
        return ad.mul(rp.lam, rp.h)
    if lam_zero:
        return 1.0
    return rp.h * float(rp.lam)


def hjb_residual_nodes(gx, dt, lap, x, rp: RwpoParams, mu=None):
    """Residual dt_phi + 1/2 |grad phi - grad psi_mu|^2 + (1/beta)(lap phi - lap psi_mu)."""
    lam = rp.lam
    mu = _resolve_mu(rp, mu)
    lam_zero = not isinstance(lam, Node) and float(lam) == 0.0
    if lam_zero:
        diff = gx
        lap_term = lap
    else:
        diff = ad.sub(gx, huber_prior_grad(x, lam, mu))
        lap_term = ad.sub(lap, huber_prior_laplacian(x, lam, mu))
    kinetic = ad.mul(0.5, ad.vsum(ad.mul(diff, diff), axis=1))
    beta_val = rp.beta if isinstance(rp.beta, Node) else float(rp.beta)
    if not isinstance(beta_val, Node) and np.isinf(beta_val):
        visc = ad.constant(np.zeros(lap.shape if isinstance(lap, Node) else np.shape(lap)))
    else:
        visc = ad.mul(ad.div(1.0, beta_val), lap_term)
    return ad.add(ad.add(dt, kinetic), visc)


def hjb_residual(pot, rp: RwpoParams, x, t, mu=None):
    """Pointwise HJB residual for a drift potential or any analytic stand-in.

    ``pot`` may be a DriftPotential or an object exposing
    ``derivatives(x, t) -> (phi, grad_x, dt, laplacian)`` as arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    if mu is None and not isinstance(rp.lam, Node) and float(rp.lam) > 0.0:
        if rp.h * float(rp.lam) <= 0:
            raise ValueError("huber width must be positive")
    with Tape() as tape:
        if isinstance(pot, DriftPotential):
            bound = {name: ad.constant(v) for name, v in pot.tensors().items()}
            _, gx, dt, lap = derivative_nodes(pot, bound, ad.constant(pts), float(t),
                                              tape, need_laplacian=True)
        else:
            _, gxv, dtv, lapv = pot.derivatives(pts, float(t))
            gx, dt, lap = ad.constant(gxv), ad.constant(dtv), ad.constant(lapv)
        res = hjb_residual_nodes(gx, dt, lap, ad.constant(pts), rp, mu=mu)
        out = res.value.copy()
    return float(out[0]) if single else out


def export_trajectory_csv(traj: Trajectory, path) -> None:
    """Write (step, token_id, x_1..x_d, logdet_accum) rows."""
    d = traj.values(0).shape[1]
    header = "step,token_id," + ",".join(f"x_{i + 1}" for i in range(d)) + ",logdet_accum"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for k in range(len(traj.states)):
            pts = traj.values(k)
            acc = traj.logdet_steps[k]
            for j in range(pts.shape[0]):
                coords = ",".join(f"{v:.17g}" for v in pts[j])
                fh.write(f"{k},{j},{coords},{acc[j]:.17g}\n")
