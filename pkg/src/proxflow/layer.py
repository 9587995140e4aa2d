"""Prox-attention layer over a token ensemble.

One layer applies, to every token simultaneously,

    x_j  <-  x_j + 1/2 [ S_tau(x_j) - sum_l softmax(U(x_j, X))_l x_l ],

where ``S_tau`` is the soft-thresholding map with threshold tau = lam*h and
``U`` is an interaction kernel obtained from the normalized heat-smoothing
of the token cloud under an L1 penalty. The kernel used here is

    U(x, y) = -(beta/2) [ (|x-y|^2 - |S(y)-y|^2) / (2h)  -  lam * |S(y)|_1 ],

i.e. the squared distance discounted by each source token's own shrinkage
residual and L1 penalty at its shrunken position. At lam = 0 this is a
plain Gaussian kernel with bandwidth 2h/beta, so the layer becomes a
heat-kernel smoother of the ensemble.

The module also carries the exact 1-D normalized-kernel oracle (adaptive
quadrature) used to validate the closed-form score, the per-token
divergence of the layer's displacement, and a baseline dot-product
attention block for comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from . import autodiff as ad
from .autodiff import Node
from .exceptions import NumericsError, QuadratureError

__all__ = [
    "TokenBatch", "RwpoParams", "BaselineAttention",
    "soft_threshold", "kernel_u", "attention_weights",
    "sparse_attention_step", "sparse_attention_divergence",
    "attention_displacement", "baseline_attention_step",
    "rwpo_kernel_1d", "attention_score_1d",
    "softplus_value", "softplus_inverse",
]

KERNEL_CLIP = 700.0


def softplus_value(x: float) -> float:
    x = float(x)
    if x > 30.0:
        return x
    return float(np.log1p(np.exp(x)))


def softplus_inverse(v: float) -> float:
    """Preimage of softplus; v must be positive."""
    v = float(v)
    if v <= 0:
        raise ValueError(f"softplus inverse requires a positive value, got {v}")
    if v > 30.0:
        return v
    return float(np.log(np.expm1(v)))


@dataclass
class TokenBatch:
    """Ensemble of N tokens in R^d at one time stamp."""

    points: np.ndarray
    time_index: int = 0
    log_density: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1 or self.points.shape[1] < 1:
            raise ValueError(f"points must be a nonempty N x d matrix, got shape {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("token positions must be finite")
        if self.log_density is not None:
            self.log_density = np.asarray(self.log_density, dtype=np.float64)
            if self.log_density.shape != (self.points.shape[0],):
                raise ValueError("log_density must have one entry per token")
            if not np.isfinite(self.log_density).all():
                raise ValueError("log_density entries must be finite")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass
class RwpoParams:
    """Prior strength lam (>= 0), inverse temperature beta (> 0), step h (> 0).

    When a parameter is trainable it is represented through an unconstrained
    raw value mapped by softplus, which keeps it strictly positive during
    optimization. ``lam``/``beta`` may also hold tape nodes while a training
    iteration is being recorded.
    """

    lam: object
    beta: object
    h: float
    trainable_lam: bool = False
    trainable_beta: bool = False
    raw_lam: float | None = None
    raw_beta: float | None = None

    def __post_init__(self):
        if float(self.h) <= 0:
            raise ValueError(f"step size h must be positive, got {self.h}")
        if not isinstance(self.lam, Node):
            if float(self.lam) < 0:
                raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if not isinstance(self.beta, Node):
            if float(self.beta) <= 0:
                raise ValueError(f"beta must be positive, got {self.beta}")
        if self.trainable_lam and self.raw_lam is None and not isinstance(self.lam, Node):
            self.raw_lam = softplus_inverse(float(self.lam))
        if self.trainable_beta and self.raw_beta is None and not isinstance(self.beta, Node):
            self.raw_beta = softplus_inverse(float(self.beta))

    def with_values(self, lam, beta) -> "RwpoParams":
        """Copy carrying explicit (possibly node-valued) lam and beta."""
        return RwpoParams(lam=lam, beta=beta, h=self.h,
                          trainable_lam=self.trainable_lam,
                          trainable_beta=self.trainable_beta,
                          raw_lam=self.raw_lam, raw_beta=self.raw_beta)

    def lam_value(self) -> float:
        return float(self.lam.value) if isinstance(self.lam, Node) else float(self.lam)

    def beta_value(self) -> float:
        return float(self.beta.value) if isinstance(self.beta, Node) else float(self.beta)


@dataclass
class BaselineAttention:
    """Query/key/value matrices of a standard dot-product attention block."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    h: float = 1.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.q.shape != self.k.shape:
            raise ValueError("query and key matrices must share a shape")
        d = self.q.shape[1]
        if self.v.shape != (d, d):
            raise ValueError(f"value matrix must be {d} x {d}, got {self.v.shape}")


def _is_plain(*vals) -> bool:
    return not any(isinstance(v, Node) for v in vals)


def soft_threshold(x, tau):
    """Componentwise sign(x) * max(|x| - tau, 0); the prox of tau * |.|_1."""
    if not isinstance(tau, Node) and float(tau) < 0:
        raise ValueError(f"threshold must be nonnegative, got {tau}")
    plain = _is_plain(x, tau)
    xn = ad.constant(x) if plain else (x if isinstance(x, Node) else ad.constant(x))
    out = ad.sub(ad.relu(ad.sub(xn, tau)), ad.relu(ad.sub(ad.neg(xn), tau)))
    return out.value if plain else out


def kernel_u(x, y, p: RwpoParams):
    """Interaction kernel between a destination token x and a source token y."""
    plain = _is_plain(x, y, p.lam, p.beta)
    xv = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    yv = y.value if isinstance(y, Node) else np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape:
        raise ValueError(f"token dimensions differ: {xv.shape} vs {yv.shape}")
    xn = x if isinstance(x, Node) else ad.constant(xv)
    yn = y if isinstance(y, Node) else ad.constant(yv)
    tau = ad.mul(p.lam, p.h)
    s_y = ad.sub(ad.relu(ad.sub(yn, tau)), ad.relu(ad.sub(ad.neg(yn), tau)))
    dxy = ad.sub(xn, yn)
    gy = ad.sub(yn, s_y)
    sq = ad.sub(ad.vsum(ad.mul(dxy, dxy)), ad.vsum(ad.mul(gy, gy)))
    inner = ad.sub(ad.div(sq, 2.0 * p.h), ad.mul(p.lam, ad.vsum(ad.absolute(s_y))))
    out = ad.mul(ad.mul(-0.5, p.beta), inner)
    return float(out.value) if plain else out


def _ensemble_kernel(x_nodes: Node, lam, beta, h: float):
    """Kernel matrix U, shrunken tokens S, and shrink residual G for a batch."""
    n, d = x_nodes.shape
    tau = ad.mul(lam, h)
    s = ad.sub(ad.relu(ad.sub(x_nodes, tau)), ad.relu(ad.sub(ad.neg(x_nodes), tau)))
    g = ad.sub(x_nodes, s)
    gnorm = ad.vsum(ad.mul(g, g), axis=1)
    l1s = ad.vsum(ad.absolute(s), axis=1)
    d2 = ad.pairwise_sqdist(x_nodes)
    inner = ad.sub(ad.div(ad.sub(d2, ad.reshape(gnorm, (1, n))), 2.0 * h),
                   ad.mul(lam, ad.reshape(l1s, (1, n))))
    u = ad.clip(ad.mul(ad.mul(-0.5, beta), inner), -KERNEL_CLIP, KERNEL_CLIP)
    if not np.isfinite(u.value).all():
        raise NumericsError("non-finite interaction kernel values")
    return u, s, g


def attention_weights(points, p: RwpoParams):
    """Softmax attention weights over the ensemble, rows summing to one."""
    if isinstance(points, TokenBatch):
        points = points.points
    plain = _is_plain(points, p.lam, p.beta)
    x = points if isinstance(points, Node) else ad.constant(points)
    if x.value.shape[0] < 1:
        raise ValueError("empty token batch")
    u, _, _ = _ensemble_kernel(x, p.lam, p.beta, p.h)
    w = ad.softmax(u)
    return w.value if plain else w


def attention_displacement(points, p: RwpoParams):
    """Displacement 1/2 [S(x_j) - sum_l W_jl x_l] applied by one layer."""
    plain = _is_plain(points, p.lam, p.beta)
    x = points if isinstance(points, Node) else ad.constant(points)
    u, s, _ = _ensemble_kernel(x, p.lam, p.beta, p.h)
    w = ad.softmax(u)
    disp = ad.mul(0.5, ad.sub(s, ad.matmul(w, x)))
    return disp.value if plain else disp


def sparse_attention_step(batch, p: RwpoParams):
    """Apply one prox-attention layer to every token.

    The softmax runs over all tokens including the self term and is
    computed with max subtraction; kernel values are clipped to
    +/- 700 before exponentiation.
    """
    if isinstance(batch, TokenBatch):
        if batch.n < 1:
            raise ValueError("empty token batch")
        new_points = sparse_attention_step(batch.points, p)
        return TokenBatch(points=new_points, time_index=batch.time_index,
                          log_density=None)
    plain = _is_plain(batch, p.lam, p.beta)
    x = batch if isinstance(batch, Node) else ad.constant(batch)
    if x.value.shape[0] < 1:
        raise ValueError("empty token batch")
    out = ad.add(x, attention_displacement(x, p))
    return out.value if plain else out


def attention_step_pieces(x: Node, p: RwpoParams):
    """Displacement and its per-token divergence from one kernel build.

    Used by the integrators, which need both quantities at the same state.
    """
    u, s, g = _ensemble_kernel(x, p.lam, p.beta, p.h)
    w = ad.softmax(u)
    disp = ad.mul(0.5, ad.sub(s, ad.matmul(w, x)))
    div = _divergence_from_kernel(x, p, s, g, w)
    return disp, div


def _divergence_from_kernel(x: Node, p: RwpoParams, s: Node, g: Node, w: Node):
    n, d = x.value.shape
    lam, beta, h = p.lam, p.beta, p.h
    tau_val = p.lam_value() * h
    sigma = ad.constant((np.abs(x.value) > tau_val).astype(np.float64))
    sign_masked = ad.constant(np.sign(x.value) * sigma.value)
    kappa = ad.div(beta, 2.0 * h)
    c = ad.add(ad.mul(kappa, ad.mul(g, ad.sub(1.0, sigma))),
               ad.mul(ad.mul(0.5, ad.mul(beta, lam)), sign_masked))
    mu = ad.matmul(w, x)
    m2 = ad.matmul(w, ad.mul(x, x))
    var_sum = ad.vsum(ad.sub(m2, ad.mul(mu, mu)), axis=1)
    c_term = ad.vsum(ad.mul(c, ad.sub(x, mu)), axis=1)
    w_diag = ad.diagonal(w)
    div = ad.mul(0.5, ad.sub(ad.sub(ad.sub(ad.vsum(sigma, axis=1),
                                           ad.mul(kappa, var_sum)),
                                    ad.mul(w_diag, c_term)),
                             ad.mul(float(d), w_diag)))
    if not np.isfinite(div.value).all():
        raise NumericsError("non-finite attention divergence")
    return div


def sparse_attention_divergence(batch, p: RwpoParams, j: int | None = None):
    """Per-token trace of the Jacobian of the layer's displacement map.

    For token j the map is x_j -> 1/2 [S(x_j) - sum_l W_jl(x_j) x_l] with
    the other tokens held fixed; x_j also moves inside the ensemble (the
    self weight and self value). The trace is assembled from the d
    coordinate directional derivatives in closed form:

        div_j = 1/2 [ sum_i sigma_ji
                      - kappa * sum_i (m2 - mu^2)_ji
                      - W_jj * sum_i c_ji (x_ji - mu_ji)
                      - d * W_jj ],

    with kappa = beta/(2h), mu = W x, m2 = W x^2 the attention moments,
    sigma = 1{|x| > lam h} the a.e. derivative of the soft threshold, and
    c the self-kernel sensitivity kappa*G*(1-sigma) + (beta lam/2)*sign(x)*sigma.
    """
    if isinstance(batch, TokenBatch):
        batch = batch.points
    plain = _is_plain(batch, p.lam, p.beta)
    x = batch if isinstance(batch, Node) else ad.constant(batch)
    n, d = x.value.shape
    u, s, g = _ensemble_kernel(x, p.lam, p.beta, p.h)
    w = ad.softmax(u)
    div = _divergence_from_kernel(x, p, s, g, w)
    if j is not None:
        if plain:
            return float(div.value[j])
        onehot = np.zeros(n)
        onehot[j] = 1.0
        return ad.vsum(ad.mul(div, ad.constant(onehot)))
    return div.value if plain else div


def baseline_attention_step(batch, a: BaselineAttention):
    """Standard residual dot-product attention update of a token ensemble."""
    if isinstance(batch, TokenBatch):
        return TokenBatch(points=baseline_attention_step(batch.points, a),
                          time_index=batch.time_index, log_density=None)
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != a.q.shape[1]:
        raise ValueError(f"token shape {x.shape} does not conform to attention matrices")
    scores = (x @ a.q.T) @ (x @ a.k.T).T
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return x + a.h * (w @ x) @ a.v.T


# ---------------------------------------------------------------------------
# exact 1-D oracle and the closed-form score it validates


def _normalizer_1d(y: float, lam: float, beta: float, h: float) -> float:
    """Z(y) = int exp[-(beta/2)(lam|z| + (z-y)^2/(2h))] dz by adaptive quadrature."""
    width = 10.0 * np.sqrt(2.0 * h / beta)
    lo, hi = y - width, y + width

    def integrand(z):
        return np.exp(-(beta / 2.0) * (lam * abs(z) + (z - y) ** 2 / (2.0 * h)))

    points = [0.0] if lo < 0.0 < hi else None
    val, err = quad(integrand, lo, hi, points=points, epsabs=1e-10, epsrel=1e-12, limit=400)
    if not np.isfinite(val) or err > 1e-9:
        raise QuadratureError(f"normalizer quadrature did not converge at y={y} (err={err})")
    return val


def rwpo_kernel_1d(rho_samples, x, p: RwpoParams):
    """Exact normalized-kernel density and score for a 1-D empirical measure.

    Substitutes the empirical measure (1/N) sum_j delta_{y_j} into the
    integral representation of the kernel-smoothed density and evaluates
    the inner normalizing integral by adaptive quadrature split at the L1
    kink. The score is a central difference of the log-density with step
    1e-6. Serves as the oracle for the closed-form attention score.
    """
    samples = np.asarray(rho_samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size < 1:
        raise ValueError("oracle requires a nonempty 1-D sample list")
    lam, beta, h = p.lam_value(), p.beta_value(), p.h
    log_z = np.array([np.log(_normalizer_1d(y, lam, beta, h)) for y in samples])

    def log_density(pt: float) -> float:
        expo = -(beta / 2.0) * (lam * abs(pt) + (pt - samples) ** 2 / (2.0 * h)) - log_z
        m = expo.max()
        return float(m + np.log(np.mean(np.exp(expo - m))))

    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    dens = np.array([np.exp(log_density(pt)) for pt in xs])
    eps = 1e-6
    score = np.array([(log_density(pt + eps) - log_density(pt - eps)) / (2 * eps) for pt in xs])
    if np.isscalar(x) or np.asarray(x).ndim == 0:
        return float(dens[0]), float(score[0])
    return dens, score


def attention_score_1d(x, samples, p: RwpoParams):
    """Closed-form score -(beta/2)[(x - S(x))/h + sum (x - y_l) w_l(x) / h].

    The weights are the softmax of the interaction kernel between the
    evaluation point and the 1-D sample set; this is the expression whose
    h -> 0 limit the quadrature oracle validates.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    lam, beta, h = p.lam_value(), p.beta_value(), p.h
    tau = lam * h
    sy = np.sign(samples) * np.maximum(np.abs(samples) - tau, 0.0)
    gy = samples - sy

    def score_at(pt: float) -> float:
        s_pt = np.sign(pt) * max(abs(pt) - tau, 0.0)
        expo = -(beta / 2.0) * (((pt - samples) ** 2 - gy ** 2) / (2.0 * h) - lam * np.abs(sy))
        expo = np.clip(expo, -KERNEL_CLIP, KERNEL_CLIP)
        expo -= expo.max()
        w = np.exp(expo)
        w /= w.sum()
        return float(-(beta / 2.0) * ((pt - s_pt) / h + np.sum((pt - samples) * w) / h))

    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.array([score_at(pt) for pt in xs])
    return float(out[0]) if np.asarray(x).ndim == 0 else out
