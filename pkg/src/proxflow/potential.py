"""Learnable scalar potential phi([x, t]) and its exact derivatives.

The potential is a residual network wrapped in a quadratic form,

    phi(z) = z^T N(z) + 1/2 |A z|^2 + b^T z + c,        z = [x, t],

with N a tanh ResNet mapping R^{d+1} -> R^{d+1}. The spatial gradient and
the time partial come from one recorded reverse pass; the spatial
Laplacian is the exact Hessian trace assembled from d forward passes over
the recorded gradient graph (forward-over-reverse), so evaluating
(phi, grad, laplacian) costs O(d * cost(phi)). All derivative outputs are
tape nodes and remain differentiable with respect to the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape

__all__ = [
    "DriftPotential", "bind", "potential_nodes", "derivative_nodes",
    "potential_eval", "spatial_grad", "time_partial", "spatial_laplacian",
    "save_checkpoint", "load_checkpoint",
]

CHECKPOINT_VERSION = 1


@dataclass
class DriftPotential:
    """Parameter container for the drift potential.

    ``opening`` maps z to the hidden width, ``hidden`` holds the residual
    layers, ``closing`` maps back to R^{d+1}. ``quad_a`` (full rank,
    (d+1) x (d+1)), ``lin_b`` and ``bias_c`` form the explicit quadratic
    part. ``residual_step`` is the ResNet step size.
    """

    dim: int
    width: int
    depth: int
    opening_w: np.ndarray
    opening_b: np.ndarray
    hidden_ws: list[np.ndarray]
    hidden_bs: list[np.ndarray]
    closing_w: np.ndarray
    closing_b: np.ndarray
    quad_a: np.ndarray
    lin_b: np.ndarray
    bias_c: np.ndarray
    residual_step: float = 1.0

    @classmethod
    def initialize(cls, dim: int, width: int, depth: int, seed: int = 0,
                   weight_std: float = 0.1) -> "DriftPotential":
        """Near-identity start: small random net weights, zero quadratic part."""
        rng = np.random.default_rng(seed)
        zin = dim + 1
        std = weight_std / np.sqrt(width)
        return cls(
            dim=dim, width=width, depth=depth,
            opening_w=rng.normal(0.0, std, size=(width, zin)),
            opening_b=np.zeros(width),
            hidden_ws=[rng.normal(0.0, std, size=(width, width)) for _ in range(depth)],
            hidden_bs=[np.zeros(width) for _ in range(depth)],
            closing_w=rng.normal(0.0, std, size=(zin, width)),
            closing_b=np.zeros(zin),
            quad_a=np.zeros((zin, zin)),
            lin_b=np.zeros(zin),
            bias_c=np.zeros(()),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        out = {
            "opening_w": self.opening_w, "opening_b": self.opening_b,
            "closing_w": self.closing_w, "closing_b": self.closing_b,
            "quad_a": self.quad_a, "lin_b": self.lin_b, "bias_c": self.bias_c,
        }
        for i, (w, b) in enumerate(zip(self.hidden_ws, self.hidden_bs)):
            out[f"hidden_w{i}"] = w
            out[f"hidden_b{i}"] = b
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        if name.startswith("hidden_w"):
            self.hidden_ws[int(name[8:])] = value
        elif name.startswith("hidden_b"):
            self.hidden_bs[int(name[8:])] = value
        else:
            setattr(self, name, value)

    def copy(self) -> "DriftPotential":
        return DriftPotential(
            dim=self.dim, width=self.width, depth=self.depth,
            opening_w=self.opening_w.copy(), opening_b=self.opening_b.copy(),
            hidden_ws=[w.copy() for w in self.hidden_ws],
            hidden_bs=[b.copy() for b in self.hidden_bs],
            closing_w=self.closing_w.copy(), closing_b=self.closing_b.copy(),
            quad_a=self.quad_a.copy(), lin_b=self.lin_b.copy(),
            bias_c=np.array(self.bias_c), residual_step=self.residual_step,
        )


def bind(pot: DriftPotential) -> dict[str, Node]:
    """Wrap every parameter tensor as a differentiable tape leaf."""
    return {name: ad.leaf(value) for name, value in pot.tensors().items()}


def potential_nodes(pot: DriftPotential, bound: dict[str, Node], x: Node, t):
    """Record phi for a batch of states; returns (z, phi) with phi of shape (B,).

    ``t`` is a shared scalar stamp or one stamp per row.
    """
    n = x.value.shape[0]
    t = np.asarray(t, dtype=np.float64)
    tcol = ad.constant(np.full((n, 1), float(t)) if t.ndim == 0 else t.reshape(n, 1))
    z = ad.concat_cols(x, tcol)
    u = ad.tanh(ad.add(ad.matmul(z, ad.transpose(bound["opening_w"])), bound["opening_b"]))
    for i in range(pot.depth):
        pre = ad.add(ad.matmul(u, ad.transpose(bound[f"hidden_w{i}"])), bound[f"hidden_b{i}"])
        u = ad.add(u, ad.mul(pot.residual_step, ad.tanh(pre)))
    n_out = ad.add(ad.matmul(u, ad.transpose(bound["closing_w"])), bound["closing_b"])
    az = ad.matmul(z, ad.transpose(bound["quad_a"]))
    phi = ad.add(
        ad.add(ad.vsum(ad.mul(z, n_out), axis=1),
               ad.mul(0.5, ad.vsum(ad.mul(az, az), axis=1))),
        ad.add(ad.matmul(z, bound["lin_b"]), bound["bias_c"]),
    )
    if not np.isfinite(phi.value).all():
        raise FloatingPointError("potential evaluated to a non-finite value")
    return z, phi


def derivative_nodes(pot: DriftPotential, bound: dict[str, Node], x: Node, t,
                     tape: Tape, need_laplacian: bool = False):
    """phi, spatial gradient, time partial, and optional spatial Laplacian.

    One reverse pass over the recorded phi region yields the full gradient
    in z; slicing gives the spatial and time components. When requested,
    d forward passes over the same region (phi plus its adjoint graph)
    produce the exact Hessian trace.
    """
    d = pot.dim
    n = x.value.shape[0]
    start = tape.mark()
    z, phi = potential_nodes(pot, bound, x, t)
    total = ad.vsum(phi)
    adjoints = ad.backward(tape, total, start=start)
    gz = adjoints.get(z)
    if gz is None:
        gz = ad.constant(np.zeros((n, d + 1)))
    grad_x = ad.getcols(gz, 0, d)
    dt = ad.reshape(ad.getcols(gz, d, d + 1), (n,))
    lap = None
    if need_laplacian:
        stop = tape.mark()
        for i in range(d):
            seed = np.zeros((n, d))
            seed[:, i] = 1.0
            tangents = ad.jvp(tape, {x: ad.constant(seed)}, start, stop)
            tz = tangents.get(gz)
            if tz is None:
                col = ad.constant(np.zeros(n))
            else:
                col = ad.reshape(ad.getcols(tz, i, i + 1), (n,))
            lap = col if lap is None else ad.add(lap, col)
    return phi, grad_x, dt, lap


def _eval_context(pot: DriftPotential, x, t, need_laplacian=False):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    with Tape() as tape:
        bound = {name: ad.constant(v) for name, v in pot.tensors().items()}
        xn = ad.constant(pts)
        phi, gx, dt, lap = derivative_nodes(pot, bound, xn, float(t), tape,
                                            need_laplacian=need_laplacian)
        out = (phi.value.copy(), gx.value.copy(), dt.value.copy(),
               None if lap is None else lap.value.copy())
    return single, out


def potential_eval(pot: DriftPotential, x, t):
    """phi at one point (returns a float) or a batch (returns shape (B,))."""
    single, (phi, _, _, _) = _eval_context(pot, x, t)
    return float(phi[0]) if single else phi


def spatial_grad(pot: DriftPotential, x, t):
    single, (_, gx, _, _) = _eval_context(pot, x, t)
    return gx[0] if single else gx


def time_partial(pot: DriftPotential, x, t):
    single, (_, _, dt, _) = _eval_context(pot, x, t)
    return float(dt[0]) if single else dt


def spatial_laplacian(pot: DriftPotential, x, t):
    single, (_, _, _, lap) = _eval_context(pot, x, t, need_laplacian=True)
    return float(lap[0]) if single else lap


def save_checkpoint(path, pot: DriftPotential, extra: dict | None = None) -> None:
    """Write named parameter tensors plus shape metadata to an .npz file."""
    payload = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "dim": np.array(pot.dim), "width": np.array(pot.width),
        "depth": np.array(pot.depth), "residual_step": np.array(pot.residual_step),
    }
    for name, value in pot.tensors().items():
        payload["tensor_" + name] = value
    for name, value in (extra or {}).items():
        payload["extra_" + name] = np.asarray(value)
    np.savez(path, **payload)


def load_checkpoint(path):
    """Read a checkpoint; returns (DriftPotential, extras dict)."""
    data = np.load(path)
    version = int(data["format_version"])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    pot = DriftPotential.initialize(dim=int(data["dim"]), width=int(data["width"]),
                                    depth=int(data["depth"]))
    pot.residual_step = float(data["residual_step"])
    for key in data.files:
        if key.startswith("tensor_"):
            pot.set_tensor(key[len("tensor_"):], np.asarray(data[key], dtype=np.float64))
    extras = {key[len("extra_"):]: data[key] for key in data.files if key.startswith("extra_")}
    return pot, extras
