import numpy as np
import pytest

from proxflow import autodiff as ad
from proxflow.datasets import FlatPrior, GaussianPrior, LaplacePrior, StandardNormalBase
from proxflow.dynamics import TimeGrid, backward_integrate, generate, hjb_residual
from proxflow.layer import RwpoParams
from proxflow.objective import (LossWeights, bayesian_loss, compose_loss,
                                generative_loss, hjb_term, nll_term,
                                supervised_node, transport_term)
from proxflow.potential import (DriftPotential, bind, potential_eval,
                                spatial_grad)


def zero_potential(dim=2):
    pot = DriftPotential.initialize(dim=dim, width=4, depth=1, seed=0)
    for name, value in pot.tensors().items():
        pot.set_tensor(name, np.zeros_like(value))
    return pot


def random_potential(dim=2, width=6, depth=2, seed=3):
    pot = DriftPotential.initialize(dim=dim, width=width, depth=depth, seed=seed)
    rng = np.random.default_rng(seed + 50)
    pot.quad_a = 0.2 * rng.normal(size=pot.quad_a.shape)
    pot.lin_b = 0.3 * rng.normal(size=pot.lin_b.shape)
    return pot


def params(lam, beta=1.0, h=0.1):
    return RwpoParams(lam=lam, beta=beta, h=h)


class TestNll:
    def test_identity_flow_recovers_base_loglik(self):
        grid = TimeGrid(steps=4, horizon=1.0)
        base = StandardNormalBase(dim=2)
        rng = np.random.default_rng(0)
        data = rng.normal(size=(16, 2))
        traj = backward_integrate(zero_potential(), params(0.0, h=grid.h), grid,
                                  data, attention=False)
        with ad.Tape():
            nll = float(nll_term(traj, base).value)
        assert nll == pytest.approx(-np.mean(base.log_density(data)), rel=1e-12)

    def test_affine_flow_matches_change_of_variables(self):
        q = np.array([[0.7, 0.1], [0.1, 0.4]])
        from scipy.linalg import sqrtm
        pot = zero_potential()
        a = np.zeros((3, 3))
        a[:2, :2] = np.real(sqrtm(q))
        pot.quad_a = a
        base = StandardNormalBase(dim=2)
        x_term = np.array([[0.9, -0.4]])
        gaps = []
        for m in (16, 32, 64):
            grid = TimeGrid(steps=m, horizon=1.0)
            traj = backward_integrate(pot, params(0.0, h=grid.h), grid, x_term)
            with ad.Tape():
                nll = float(nll_term(traj, base).value)
            x0 = traj.values(0)[0]
            exact = -(base.log_density(x0[None])[0]
                      + m * np.log(abs(np.linalg.det(np.eye(2) - grid.h * q))))
            gaps.append(abs(nll - exact))
        assert gaps[2] <= 0.55 * gaps[1] <= 0.55 * 0.55 * gaps[0]

    def test_requires_tracked_backward_trajectory(self):
        grid = TimeGrid(steps=2, horizon=0.2)
        traj = generate(zero_potential(), params(0.0, h=grid.h), grid,
                        np.zeros((1, 2)) + 0.5)
        with pytest.raises(ValueError):
            nll_term(traj, StandardNormalBase(dim=2))


class TestTransport:
    def test_zero_for_zero_potential(self):
        grid = TimeGrid(steps=3, horizon=0.3)
        pot = zero_potential()
        traj = backward_integrate(pot, params(0.0, h=grid.h), grid,
                                  np.random.default_rng(1).normal(size=(5, 2)))
        assert transport_term(traj, pot, params(0.0, h=grid.h)) == 0.0

    def test_constant_gradient_closed_form(self):
        # phi = b . z with spatial part (1.5, -0.5): the kinetic term is
        # horizon/2 * |b_spatial|^2 exactly.
        pot = zero_potential()
        pot.lin_b = np.array([1.5, -0.5, 0.3])
        grid = TimeGrid(steps=5, horizon=1.0)
        rp = params(0.0, h=grid.h)
        traj = backward_integrate(pot, rp, grid,
                                  np.random.default_rng(2).normal(size=(4, 2)))
        expected = 0.5 * (1.5 ** 2 + 0.5 ** 2)
        assert transport_term(traj, pot, rp) == pytest.approx(expected, rel=1e-12)

    def test_matches_independent_summation(self):
        pot = random_potential(seed=7)
        grid = TimeGrid(steps=4, horizon=0.8)
        rp = params(0.9, beta=1.2, h=grid.h)
        data = np.random.default_rng(3).normal(size=(6, 2)) + 0.5
        traj = backward_integrate(pot, rp, grid, data)
        mu = rp.h * rp.lam
        acc = 0.0
        for k in range(grid.steps):
            x = traj.values(k)
            gx = spatial_grad(pot, x, grid.stamps[k])
            pg = rp.lam * np.clip(x / mu, -1.0, 1.0)
            acc += np.sum((gx - pg) ** 2)
        expected = grid.h / (2 * 6) * acc
        assert transport_term(traj, pot, rp) == pytest.approx(expected, rel=1e-10)


class TestHjbTerm:
    def test_zero_for_zero_potential(self):
        grid = TimeGrid(steps=3, horizon=0.3)
        pot = zero_potential()
        rp = params(0.0, h=grid.h)
        traj = backward_integrate(pot, rp, grid,
                                  np.random.default_rng(4).normal(size=(5, 2)))
        assert hjb_term(traj, pot, rp) == 0.0

    def test_matches_independent_summation(self):
        pot = random_potential(seed=9)
        grid = TimeGrid(steps=4, horizon=0.8)
        rp = params(0.7, beta=1.5, h=grid.h)
        data = np.random.default_rng(5).normal(size=(5, 2)) + 0.4
        traj = backward_integrate(pot, rp, grid, data)
        acc = 0.0
        for k in range(grid.steps):
            res = hjb_residual(pot, rp, traj.values(k), grid.stamps[k])
            acc += np.sum(res ** 2)
        expected = grid.h / 5 * acc
        assert hjb_term(traj, pot, rp) == pytest.approx(expected, rel=1e-10)


class TestPermutationInvariance:
    def test_all_terms_invariant(self):
        pot = random_potential(seed=11)
        grid = TimeGrid(steps=3, horizon=0.6)
        rp = params(0.8, beta=1.1, h=grid.h)
        base = StandardNormalBase(dim=2)
        weights = LossWeights(c_hjb=0.3)
        rng = np.random.default_rng(6)
        data = rng.normal(size=(8, 2))
        perm = rng.permutation(8)
        with ad.Tape():
            _, bd1, _ = generative_loss(pot, rp, grid, data, base, weights)
        with ad.Tape():
            _, bd2, _ = generative_loss(pot, rp, grid, data[perm], base, weights)
        assert bd1.total == pytest.approx(bd2.total, rel=1e-12)
        assert bd1.nll == pytest.approx(bd2.nll, rel=1e-12)


class TestGradients:
    def _loss_value(self, pot, raw_lam, raw_beta, grid, data, base, weights):
        with ad.Tape():
            lam = ad.softplus(ad.constant(raw_lam))
            beta = ad.softplus(ad.constant(raw_beta))
            rp = RwpoParams(lam=lam, beta=beta, h=grid.h)
            total, _, _ = generative_loss(pot, rp, grid, data, base, weights)
            return float(total.value)

    def test_full_loss_gradient_matches_finite_differences(self):
        # Two-layer net, d=2, N=8, M=2: every parameter tensor plus the
        # raw attention parameters against central differences.
        pot = random_potential(dim=2, width=4, depth=2, seed=13)
        grid = TimeGrid(steps=2, horizon=0.5)
        base = StandardNormalBase(dim=2)
        weights = LossWeights(c_hjb=0.2, w_transport=1.0)
        rng = np.random.default_rng(7)
        data = rng.normal(size=(8, 2)) + 0.3
        raw_lam, raw_beta = 0.2, 0.4

        with ad.Tape() as tape:
            bound = bind(pot)
            lam_leaf = ad.leaf(raw_lam)
            beta_leaf = ad.leaf(raw_beta)
            rp = RwpoParams(lam=ad.softplus(lam_leaf), beta=ad.softplus(beta_leaf),
                            h=grid.h)
            total, _, _ = generative_loss(pot, rp, grid, data, base, weights,
                                          bound=bound)
            names = sorted(bound)
            grads = ad.grad(tape, total, [bound[n] for n in names]
                            + [lam_leaf, beta_leaf])

        step = 1e-5
        for name, g in zip(names, grads):
            flat = pot.tensors()[name]
            count = 1 if flat.ndim == 0 else min(3, flat.size)
            for idx in range(count):
                up = pot.copy()
                arr = up.tensors()[name].copy().astype(np.float64)
                arr.ravel()[idx] += step
                up.set_tensor(name, arr)
                down = pot.copy()
                arr2 = down.tensors()[name].copy().astype(np.float64)
                arr2.ravel()[idx] -= step
                down.set_tensor(name, arr2)
                fd = (self._loss_value(up, raw_lam, raw_beta, grid, data, base, weights)
                      - self._loss_value(down, raw_lam, raw_beta, grid, data, base, weights)) / (2 * step)
                got = np.asarray(g).ravel()[idx]
                assert got == pytest.approx(fd, rel=1e-4, abs=1e-9), name

        for offset, g in ((np.array([step, 0.0]), grads[-2]), (np.array([0.0, step]), grads[-1])):
            fd = (self._loss_value(pot, raw_lam + offset[0], raw_beta + offset[1],
                                   grid, data, base, weights)
                  - self._loss_value(pot, raw_lam - offset[0], raw_beta - offset[1],
                                     grid, data, base, weights)) / (2 * step)
            assert float(g) == pytest.approx(fd, rel=1e-4)

    def test_detach_attention_zeroes_kernel_gradients(self):
        pot = random_potential(dim=2, width=4, depth=1, seed=17)
        grid = TimeGrid(steps=2, horizon=0.4)
        base = StandardNormalBase(dim=2)
        weights = LossWeights(c_hjb=0.0, w_transport=0.0)
        data = np.random.default_rng(8).normal(size=(6, 2)) + 0.4
        with ad.Tape() as tape:
            lam_leaf = ad.leaf(0.3)
            beta_leaf = ad.leaf(0.1)
            rp = RwpoParams(lam=ad.softplus(lam_leaf), beta=ad.softplus(beta_leaf),
                            h=grid.h)
            total, _, _ = generative_loss(pot, rp, grid, data, base, weights,
                                          detach_attention=True)
            g_lam, g_beta = ad.grad(tape, total, [lam_leaf, beta_leaf])
        assert g_lam == 0.0 and g_beta == 0.0


class TestBayesianLoss:
    def _forward_traj(self, pot, rp, grid, n=12, seed=9):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=(n, 2))
        return generate(pot, rp, grid, x0, track_logdensity=True)

    def test_vanishing_likelihood_reduces_to_entropy(self):
        grid = TimeGrid(steps=3, horizon=0.6)
        pot = random_potential(seed=19)
        rp = params(0.5, h=grid.h)
        traj = self._forward_traj(pot, rp, grid)
        y = np.array([0.3, -0.2])
        bd = bayesian_loss(traj, y, np.eye(2), sigma=1e9, prior=FlatPrior())
        base = StandardNormalBase(dim=2)
        x0 = traj.values(0)
        entropy = np.mean(base.log_density(x0) - traj.logdet_values)
        assert bd.nll == pytest.approx(entropy, abs=1e-8)

    def test_laplace_prior_plugs_in(self):
        grid = TimeGrid(steps=3, horizon=0.6)
        pot = random_potential(seed=19)
        rp = params(0.5, h=grid.h)
        traj = self._forward_traj(pot, rp, grid)
        y = np.array([0.3, -0.2])
        rate = 1.0
        flat = bayesian_loss(traj, y, np.eye(2), sigma=1e9, prior=FlatPrior())
        lap = bayesian_loss(traj, y, np.eye(2), sigma=1e9,
                            prior=LaplacePrior(rate=rate, dim=2))
        xt = traj.values(grid.steps)
        expected_gap = rate * np.mean(np.abs(xt).sum(axis=1)) - 2 * np.log(rate / 2.0)
        assert lap.nll - flat.nll == pytest.approx(expected_gap, rel=1e-10)

    def test_gaussian_prior_and_supervision(self):
        grid = TimeGrid(steps=2, horizon=0.4)
        pot = random_potential(seed=23)
        rp = params(0.3, h=grid.h)
        traj = self._forward_traj(pot, rp, grid, n=6)
        xt = traj.values(grid.steps)
        targets = xt + 0.5
        weights = LossWeights(c_hjb=0.0, w_supervised=2.0)
        bd = bayesian_loss(traj, np.array([0.1, 0.1]), np.eye(2), sigma=1.0,
                           prior=GaussianPrior(np.zeros(2), np.eye(2)),
                           paired_x=targets, weights=weights)
        assert bd.supervised == pytest.approx(0.5 ** 2 * 2, rel=1e-12)
        assert bd.total == pytest.approx(bd.nll + 2.0 * bd.supervised, rel=1e-12)

    def test_invalid_sigma_rejected(self):
        grid = TimeGrid(steps=2, horizon=0.4)
        pot = random_potential(seed=23)
        rp = params(0.3, h=grid.h)
        traj = self._forward_traj(pot, rp, grid, n=4)
        with pytest.raises(ValueError):
            bayesian_loss(traj, np.zeros(2), np.eye(2), sigma=0.0, prior=FlatPrior())

    def test_callable_forward_operator_gradient(self):
        # A nonlinear black-box operator still drives gradients through its
        # finite-difference linearization.
        grid = TimeGrid(steps=2, horizon=0.4)
        pot = random_potential(seed=29)
        base = StandardNormalBase(dim=2)
        y = np.array([0.5])

        def op(row):
            return np.array([row[0] ** 2 + 0.5 * row[1]])

        def loss_for(pot_variant):
            with ad.Tape() as tape:
                bound = bind(pot_variant)
                rp = params(0.2, h=grid.h)
                rng = np.random.default_rng(10)
                x0 = rng.normal(size=(5, 2))
                traj = generate(pot_variant, rp, grid, x0, bound=bound,
                                track_logdensity=True)
                from proxflow.objective import bayesian_nll_node
                nll = bayesian_nll_node(traj, y, op, sigma=0.8, prior=FlatPrior(),
                                        base=base)
                return tape, nll, bound

        tape, nll, bound = loss_for(pot)
        (g,) = ad.grad(tape, nll, [bound["lin_b"]])
        step = 1e-6
        up, down = pot.copy(), pot.copy()
        arr = up.lin_b.copy()
        arr[0] += step
        up.lin_b = arr
        arr2 = down.lin_b.copy()
        arr2[0] -= step
        down.lin_b = arr2
        _, nll_up, _ = loss_for(up)
        _, nll_down, _ = loss_for(down)
        fd = (float(nll_up.value) - float(nll_down.value)) / (2 * step)
        assert g[0] == pytest.approx(fd, rel=1e-4)
