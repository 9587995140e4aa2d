"""Quantitative checks of the flow's convergence and contraction behavior.

Contains the sampling mode with an analytic drift (no learned potential),
closed-form directional-consistency constants for Laplace and Gaussian
pairs, the KL decay bound they feed, empirical moment tracks, a Gaussian
KDE, and an unbiased RBF maximum mean discrepancy with the median
heuristic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .dynamics import TimeGrid, Trajectory
from .exceptions import NumericsError
from .layer import RwpoParams, attention_displacement

__all__ = [
    "TheoryParams", "LaplacePair", "GaussianPair", "ConsistencyStats",
    "sample_brwp", "directional_consistency", "kl_upper_bound",
    "second_moment", "l1_moment", "gaussian_fit_kl", "bootstrap_std",
    "gaussian_target_diagnostics", "kde_2d", "mmd", "median_heuristic",
    "write_metrics_csv", "write_mmd_csv",
]


@dataclass
class TheoryParams:
    """Constants of the decay bound: consistency constant gamma,
    log-Sobolev constant c_ls (a = 2 / c_ls), and the prior strength."""

    gamma: float
    c_ls: float
    lam: float

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.c_ls <= 0:
            raise ValueError("log-Sobolev constant must be positive")

    @property
    def a(self) -> float:
        return 2.0 / self.c_ls


@dataclass
class LaplacePair:
    """Current law Laplace(a), target Laplace(b), both rate-parameterized."""

    a: float
    b: float


@dataclass
class GaussianPair:
    """Current law N(0, tau2), target N(0, sigma2)."""

    tau2: float
    sigma2: float


@dataclass
class ConsistencyStats:
    d_value: float
    fisher: float
    gamma_effective: float | None


def directional_consistency(family) -> ConsistencyStats:
    """Closed-form dissipation term D, relative Fisher information I, and
    their ratio D / sqrt(I) for the two tractable families."""
    if isinstance(family, LaplacePair):
        if family.a <= 0 or family.b <= 0:
            raise ValueError("Laplace rates must be positive")
        d = family.b - family.a
        fisher = (family.a - family.b) ** 2
    elif isinstance(family, GaussianPair):
        if family.tau2 <= 0 or family.sigma2 <= 0:
            raise ValueError("variances must be positive")
        c = 1.0 / family.sigma2 - 1.0 / family.tau2
        tau = np.sqrt(family.tau2)
        d = np.sqrt(2.0 / np.pi) * c * tau
        fisher = c ** 2 * family.tau2
    else:
        raise TypeError(f"unsupported family {type(family).__name__}")
    gamma_eff = d / np.sqrt(fisher) if fisher > 0 else None
    return ConsistencyStats(d_value=float(d), fisher=float(fisher),
                            gamma_effective=None if gamma_eff is None else float(gamma_eff))


def kl_upper_bound(y0: float, t, params: TheoryParams):
    """Decay bound ((sqrt(y0) + lam*gamma/sqrt(a)) e^{-a t / 2} - lam*gamma/sqrt(a))_+^2."""
    if y0 < 0:
        raise ValueError("initial divergence must be nonnegative")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("times must be nonnegative")
    a = params.a
    shift = params.lam * params.gamma / np.sqrt(a)
    z = (np.sqrt(y0) + shift) * np.exp(-0.5 * a * t) - shift
    out = np.maximum(z, 0.0) ** 2
    return float(out) if out.ndim == 0 else out


def sample_brwp(target_grad, rp: RwpoParams, grid: TimeGrid, x0) -> Trajectory:
    """Forward flow with an analytic drift gradient in place of the
    learned potential: drift half-step then the prox-attention layer."""
    x = np.asarray(x0, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("initial ensemble must be a nonempty N x d matrix")
    if not np.isclose(rp.h, grid.h, rtol=1e-12):
        raise ValueError(f"attention step size {rp.h} does not match grid step {grid.h}")
    states = [x.copy()]
    for k in range(grid.steps):
        drift = np.asarray(target_grad(x), dtype=np.float64)
        if drift.shape != x.shape:
            raise ValueError("drift gradient must match the ensemble shape")
        x = x + grid.h * drift
        x = x + attention_displacement(x, rp)
        if not np.isfinite(x).all():
            raise NumericsError(f"sampling diverged at step {k}")
        states.append(x.copy())
    zeros = [np.zeros(x.shape[0]) for _ in states]
    return Trajectory(states=states, logdet=None, logdet_steps=zeros,
                      direction="forward", grid=grid, tracked=False)


def second_moment(traj: Trajectory) -> np.ndarray:
    """Mean squared norm per recorded step."""
    return np.array([np.mean(np.sum(traj.values(k) ** 2, axis=1))
                     for k in range(len(traj.states))])


def l1_moment(traj: Trajectory) -> np.ndarray:
    """Mean L1 norm per recorded step."""
    return np.array([np.mean(np.abs(traj.values(k)).sum(axis=1))
                     for k in range(len(traj.states))])


def gaussian_fit_kl(samples: np.ndarray, sigma2: float) -> float:
    """KL of the moment-matched Gaussian fit against N(0, sigma2 I)."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValueError("need at least two samples for a moment fit")
    d = x.shape[1]
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(d, d)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("degenerate sample covariance")
    return 0.5 * (np.trace(cov) / sigma2 + mean @ mean / sigma2 - d
                  - logdet + d * np.log(sigma2))


def bootstrap_std(samples: np.ndarray, stat, n_boot: int = 64, seed: int = 0) -> float:
    """Bootstrap standard deviation of a statistic over token resamples."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_boot):
        idx = rng.integers(0, x.shape[0], size=x.shape[0])
        vals.append(stat(x[idx]))
    return float(np.std(vals))


def gaussian_target_diagnostics(traj: Trajectory, sigma2: float,
                                theory: TheoryParams, n_boot: int = 64,
                                seed: int = 0) -> dict:
    """Per-step moments, fitted KL with bootstrap error, and the decay bound."""
    stamps = traj.grid.stamps
    m2 = second_moment(traj)
    l1 = l1_moment(traj)
    kl = np.array([gaussian_fit_kl(traj.values(k), sigma2)
                   for k in range(len(traj.states))])
    kl_std = np.array([bootstrap_std(traj.values(k),
                                     lambda s: gaussian_fit_kl(s, sigma2),
                                     n_boot=n_boot, seed=seed + k)
                       for k in range(len(traj.states))])
    bound = kl_upper_bound(kl[0], stamps, theory)
    return {"t": stamps, "m2": m2, "l1": l1, "kl": kl, "kl_std": kl_std,
            "kl_bound": bound}


# ---------------------------------------------------------------------------
# density and two-sample diagnostics


def kde_2d(samples: np.ndarray, bandwidth: float, grid_x: np.ndarray,
           grid_y: np.ndarray) -> np.ndarray:
    """Gaussian-kernel density estimate on a regular grid; rows follow y."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] < 1 or x.shape[1] != 2:
        raise ValueError("need a nonempty set of 2-D samples")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    gx, gy = np.meshgrid(grid_x, grid_y)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    sq = cdist(pts, x, "sqeuclidean")
    dens = np.exp(-sq / (2 * bandwidth ** 2)).mean(axis=1)
    dens /= 2 * np.pi * bandwidth ** 2
    return dens.reshape(gx.shape)


def median_heuristic(a: np.ndarray, b: np.ndarray, max_points: int = 1000,
                     seed: int = 0) -> float:
    """Median pairwise distance of the pooled sample."""
    pooled = np.vstack([np.atleast_2d(a), np.atleast_2d(b)])
    if pooled.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        pooled = pooled[rng.choice(pooled.shape[0], max_points, replace=False)]
    dists = cdist(pooled, pooled)
    positive = dists[np.triu_indices_from(dists, k=1)]
    med = float(np.median(positive))
    if med <= 0:
        raise ValueError("degenerate bandwidth from identical samples")
    return med


def mmd(samples_a: np.ndarray, samples_b: np.ndarray,
        bandwidth: float | None = None) -> float:
    """Unbiased squared maximum mean discrepancy with an RBF kernel."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples on each side")
    if bandwidth is None:
        bandwidth = median_heuristic(a, b)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    gamma = 1.0 / (2 * bandwidth ** 2)
    kaa = np.exp(-gamma * cdist(a, a, "sqeuclidean"))
    kbb = np.exp(-gamma * cdist(b, b, "sqeuclidean"))
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    m, n = a.shape[0], b.shape[0]
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2 * kab.mean())


def write_metrics_csv(path, diagnostics: dict) -> None:
    """Columns (t, M2, L1_moment, KL_est, KL_bound)."""
    with open(path, "w") as fh:
        fh.write("t,M2,L1_moment,KL_est,KL_bound\n")
        for i in range(len(diagnostics["t"])):
            row = (diagnostics["t"][i], diagnostics["m2"][i], diagnostics["l1"][i],
                   diagnostics["kl"][i], diagnostics["kl_bound"][i])
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def write_mmd_csv(path, rows: list[tuple]) -> None:
    """Columns (dataset, MMD2, bandwidth)."""
    with open(path, "w") as fh:
        fh.write("dataset,MMD2,bandwidth\n")
        for name, value, bandwidth in rows:
            fh.write(f"{name},{value:.17g},{bandwidth:.17g}\n")
