"""Benchmark distributions, the base density, and desk-scale inverse problems.

Every generator is a pure function of (name, n, seed). The 2-D benchmark
constructions follow the usual community recipes: noisy half-circles,
concentric rings, interleaved spirals, a ring of eight Gaussians (radius 4,
std 0.2), and a 4 x 4 alternating checkerboard on [-4, 4]^2 (kept
jitter-free so its support test is exact; the others carry 0.05 jitter).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .exceptions import NumericsError

__all__ = [
    "BENCHMARK_IDS", "StandardNormalBase", "sample_benchmark",
    "lorenz_observe", "lorenz_rhs", "LinearGaussianProblem",
    "linear_gaussian_problem", "GaussianPrior", "LaplacePrior", "FlatPrior",
    "export_samples_csv", "import_samples_csv",
]

BENCHMARK_IDS = ("moons", "rings", "two_spirals", "eight_gaussians", "checkerboard")

JITTER_STD = 0.05


@dataclass
class StandardNormalBase:
    """Standard normal base distribution in d dimensions."""

    dim: int

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(size=(n, self.dim))

    def log_density(self, x):
        const = -0.5 * self.dim * np.log(2.0 * np.pi)
        if isinstance(x, Node):
            return ad.add(ad.mul(-0.5, ad.vsum(ad.mul(x, x), axis=1)), const)
        x = np.asarray(x, dtype=np.float64)
        return -0.5 * np.sum(x * x, axis=-1) + const


def _moons(n: int, rng: np.random.Generator) -> np.ndarray:
    n_out = n // 2
    n_in = n - n_out
    t_out = rng.random(n_out) * np.pi
    t_in = rng.random(n_in) * np.pi
    outer = np.column_stack([np.cos(t_out), np.sin(t_out)])
    inner = np.column_stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)])
    pts = np.vstack([outer, inner])
    return pts + rng.normal(scale=JITTER_STD, size=pts.shape)


def _rings(n: int, rng: np.random.Generator) -> np.ndarray:
    radii = np.array([1.0, 1.5, 2.0, 2.5])
    which = rng.integers(0, len(radii), size=n)
    angles = rng.random(n) * 2 * np.pi
    pts = radii[which, None] * np.column_stack([np.cos(angles), np.sin(angles)])
    return pts + rng.normal(scale=JITTER_STD, size=pts.shape)


def _two_spirals(n: int, rng: np.random.Generator) -> np.ndarray:
    n1 = n // 2
    t = np.sqrt(rng.random(n)) * 3 * np.pi
    r = t / (3 * np.pi) * 2.0
    pts = np.column_stack([r * np.cos(t), r * np.sin(t)])
    pts[:n1] *= -1.0
    return pts + rng.normal(scale=JITTER_STD, size=pts.shape)


def _eight_gaussians(n: int, rng: np.random.Generator) -> np.ndarray:
    angles = 2 * np.pi * np.arange(8) / 8
    centers = 4.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    which = rng.integers(0, 8, size=n)
    return centers[which] + rng.normal(scale=0.2, size=(n, 2))


def _checkerboard(n: int, rng: np.random.Generator) -> np.ndarray:
    # 8 permitted cells of the 4 x 4 alternating grid on [-4, 4]^2.
    cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    which = rng.integers(0, len(cells), size=n)
    offsets = rng.random(size=(n, 2)) * 2.0
    base = np.array([[-4.0 + 2.0 * i, -4.0 + 2.0 * j] for i, j in cells])
    return base[which] + offsets


_GENERATORS: dict[str, Callable] = {
    "moons": _moons,
    "rings": _rings,
    "two_spirals": _two_spirals,
    "eight_gaussians": _eight_gaussians,
    "checkerboard": _checkerboard,
}


def sample_benchmark(name: str, n: int, seed: int, embed_dim: int | None = None) -> np.ndarray:
    """Draw n points from a named 2-D benchmark law.

    ``embed_dim`` pads the samples with N(0, 0.1^2) nuisance coordinates up
    to the requested dimension.
    """
    if name not in _GENERATORS:
        raise ValueError(f"unknown benchmark id {name!r}; known: {', '.join(BENCHMARK_IDS)}")
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    pts = _GENERATORS[name](n, rng)
    if embed_dim is not None:
        if embed_dim < 2:
            raise ValueError("embedding dimension must be at least 2")
        pad = rng.normal(scale=0.1, size=(n, embed_dim - 2))
        pts = np.hstack([pts, pad])
    return pts


# ---------------------------------------------------------------------------
# Lorenz-63


def lorenz_rhs(state: np.ndarray, sigma: float, r: float, b: float) -> np.ndarray:
    x1, x2, x3 = state
    return np.array([sigma * (x2 - x1), x1 * (r - x3) - x2, x1 * x2 - b * x3])


def _rk4_path(params, t_total: float, dt: float, record_from: float):
    """Integrate from (1,1,1); returns times and states after ``record_from``."""
    sigma, r, b = (float(v) for v in params)
    state = np.array([1.0, 1.0, 1.0])
    steps = int(round(t_total / dt))
    keep_t, keep_x = [], []
    t = 0.0
    for _ in range(steps):
        k1 = lorenz_rhs(state, sigma, r, b)
        k2 = lorenz_rhs(state + 0.5 * dt * k1, sigma, r, b)
        k3 = lorenz_rhs(state + 0.5 * dt * k2, sigma, r, b)
        k4 = lorenz_rhs(state + dt * k3, sigma, r, b)
        state = state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
        if not np.isfinite(state).all():
            raise NumericsError(f"Lorenz integration diverged at t={t:.3f}")
        if t >= record_from - 1e-12:
            keep_t.append(t)
            keep_x.append(state.copy())
    return np.array(keep_t), np.array(keep_x)


def lorenz_observe(params, t_spin: float = 10.0, t_ob: float = 1.0, n_mea: int = 3,
                   noise_std: float = 1e-2, seed: int = 0, dt: float = 1e-3) -> np.ndarray:
    """Averaged noisy observations of the Lorenz-63 state.

    After a spin-up of ``t_spin`` the three coordinates are averaged over
    ``n_mea`` consecutive windows of length ``t_ob`` and perturbed with
    i.i.d. Gaussian noise, giving a vector of length 3 * n_mea ordered as
    (window, coordinate).
    """
    if t_spin <= 0 or t_ob <= 0:
        raise ValueError("spin-up and observation windows must be positive")
    if n_mea < 1:
        raise ValueError("need at least one measurement window")
    total = t_spin + n_mea * t_ob
    times, states = _rk4_path(params, total, dt, record_from=t_spin)
    rng = np.random.default_rng(seed)
    obs = []
    for j in range(n_mea):
        lo = t_spin + j * t_ob
        hi = lo + t_ob
        mask = (times > lo + 1e-12) & (times <= hi + 1e-12)
        obs.append(states[mask].mean(axis=0))
    y = np.concatenate(obs)
    return y + rng.normal(scale=noise_std, size=y.shape)


# ---------------------------------------------------------------------------
# linear-Gaussian inverse problem with a conjugate oracle


@dataclass
class LinearGaussianProblem:
    forward: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    noise_std: float

    @property
    def dim(self) -> int:
        return self.forward.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.forward.shape[0]

    def observe(self, x_true: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.forward @ x_true + rng.normal(scale=self.noise_std, size=self.obs_dim)

    def posterior(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Conjugate posterior mean and covariance for a measurement y."""
        prior_prec = np.linalg.inv(self.prior_cov)
        prec = prior_prec + self.forward.T @ self.forward / self.noise_std ** 2
        cov = np.linalg.inv(prec)
        mean = cov @ (prior_prec @ self.prior_mean + self.forward.T @ y / self.noise_std ** 2)
        return mean, cov


def linear_gaussian_problem(d: int, m: int, seed: int, noise_std: float = 0.5) -> LinearGaussianProblem:
    """Random well-conditioned forward matrix with a standard normal prior."""
    if d < 1 or m < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(m, d))
    u, _, vt = np.linalg.svd(raw, full_matrices=False)
    singulars = np.linspace(0.6, 1.4, min(m, d))
    fwd = (u * singulars) @ vt
    return LinearGaussianProblem(forward=fwd, prior_mean=np.zeros(d),
                                 prior_cov=np.eye(d), noise_std=noise_std)


# ---------------------------------------------------------------------------
# priors for the conditional-flow loss


@dataclass
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray
    _prec: np.ndarray = field(init=False, repr=False)
    _logdet: float = field(init=False, repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        self._prec = np.linalg.inv(self.cov)
        sign, logdet = np.linalg.slogdet(self.cov)
        if sign <= 0:
            raise ValueError("prior covariance must be positive definite")
        self._logdet = logdet

    def log_density(self, x):
        d = self.mean.size
        const = -0.5 * (d * np.log(2 * np.pi) + self._logdet)
        if isinstance(x, Node):
            centered = ad.sub(x, ad.constant(self.mean))
            quad = ad.vsum(ad.mul(centered, ad.matmul(centered, ad.constant(self._prec.T))), axis=1)
            return ad.add(ad.mul(-0.5, quad), const)
        centered = np.asarray(x, dtype=np.float64) - self.mean
        quad = np.einsum("ni,ij,nj->n", centered, self._prec, centered)
        return -0.5 * quad + const


@dataclass
class LaplacePrior:
    """Isotropic Laplace prior with density proportional to exp(-rate |x|_1)."""

    rate: float
    dim: int

    def log_density(self, x):
        const = self.dim * np.log(self.rate / 2.0)
        if isinstance(x, Node):
            return ad.add(ad.mul(-self.rate, ad.vsum(ad.absolute(x), axis=1)), const)
        x = np.asarray(x, dtype=np.float64)
        return -self.rate * np.abs(x).sum(axis=-1) + const


@dataclass
class FlatPrior:
    """Improper constant prior; contributes nothing to the loss."""

    def log_density(self, x):
        if isinstance(x, Node):
            return ad.constant(np.zeros(x.shape[0]))
        return np.zeros(np.asarray(x).shape[0])


# ---------------------------------------------------------------------------
# CSV import/export


def export_samples_csv(path, x: np.ndarray, y: np.ndarray | None = None) -> None:
    """Write (sample_id, x_1..x_d[, y_1..y_m]) rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cols = ["sample_id"] + [f"x_{i + 1}" for i in range(x.shape[1])]
    if y is not None:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        cols += [f"y_{i + 1}" for i in range(y.shape[1])]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(x.shape[0]):
            row = [str(i)] + [f"{v:.17g}" for v in x[i]]
            if y is not None:
                row += [f"{v:.17g}" for v in y[i]]
            fh.write(",".join(row) + "\n")


def import_samples_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    x_cols = [i for i, c in enumerate(header) if c.startswith("x_")]
    y_cols = [i for i, c in enumerate(header) if c.startswith("y_")]
    x = np.array([[float(r[i]) for i in x_cols] for r in rows])
    y = np.array([[float(r[i]) for i in y_cols] for r in rows]) if y_cols else None
    return x, y
