import numpy as np
import pytest
from scipy.spatial.distance import cdist

from proxflow import autodiff as ad
from proxflow import layer
from proxflow.layer import (
    BaselineAttention, RwpoParams, TokenBatch,
    attention_score_1d, attention_weights, baseline_attention_step,
    kernel_u, rwpo_kernel_1d, soft_threshold, sparse_attention_divergence,
    sparse_attention_step,
)


def params(lam, beta=1.0, h=0.1):
    return RwpoParams(lam=lam, beta=beta, h=h)


def scalar_step_oracle(xs, lam, beta, h):
    """Loop-based re-evaluation of the layer update for 1-D tokens."""
    tau = lam * h

    def st(v):
        return np.sign(v) * max(abs(v) - tau, 0.0)

    out = []
    for xj in xs:
        us = []
        for xl in xs:
            sl = st(xl)
            us.append(-(beta / 2) * (((xj - xl) ** 2 - (xl - sl) ** 2) / (2 * h) - lam * abs(sl)))
        us = np.asarray(us)
        us -= us.max()
        w = np.exp(us)
        w /= w.sum()
        out.append(xj + 0.5 * (st(xj) - float(np.dot(w, xs))))
    return np.asarray(out)


def fd_divergence(points, p, j, delta=1e-5):
    """Central-difference trace of token j's displacement map."""
    d = points.shape[1]
    total = 0.0
    for i in range(d):
        for sign in (+1, -1):
            shifted = points.copy()
            shifted[j, i] += sign * delta
            disp = sparse_attention_step(shifted, p)[j] - shifted[j]
            total += sign * disp[i] / (2 * delta)
    return total


class TestSoftThreshold:
    def test_formula_cases(self):
        out = soft_threshold(np.array([1.2, 0.3, -1.0]), 0.5)
        np.testing.assert_allclose(out, [0.7, 0.0, -0.5], atol=1e-15)

    def test_zero_threshold_is_identity(self):
        x = np.array([0.4, -2.0, 0.0, 5.5])
        np.testing.assert_array_equal(soft_threshold(x, 0.0), x)

    def test_boundary_maps_to_zero(self):
        assert soft_threshold(np.array([0.5]), 0.5)[0] == 0.0

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            soft_threshold(np.array([1.0]), -0.1)


class TestKernel:
    def test_zero_lam_is_gaussian_kernel(self):
        # With no shrinkage the kernel is a plain squared-distance kernel
        # with bandwidth 2h/beta.
        rng = np.random.default_rng(0)
        p = params(0.0, beta=2.0, h=0.3)
        for _ in range(5):
            x, y = rng.normal(size=(2, 3))
            expected = -p.beta * np.sum((x - y) ** 2) / (4 * p.h)
            assert kernel_u(x, y, p) == pytest.approx(expected, rel=1e-12)

    def test_origin_pair_is_zero(self):
        p = params(1.3, beta=0.7, h=0.2)
        assert kernel_u(np.zeros(2), np.zeros(2), p) == 0.0

    def test_hand_evaluated_instance(self):
        # x=1, y=0, lam=1, beta=2, h=0.25: S(y)=0, so
        # U = -(2/2) * [ (1 - 0) / 0.5 - 1*0 ] = -2.
        p = params(1.0, beta=2.0, h=0.25)
        assert kernel_u(np.array([1.0]), np.array([0.0]), p) == pytest.approx(-2.0, rel=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kernel_u(np.zeros(2), np.zeros(3), params(1.0))

    def test_translation_invariance_at_zero_lam(self):
        rng = np.random.default_rng(1)
        p = params(0.0, beta=1.4, h=0.2)
        x, y, c = rng.normal(size=(3, 4))
        assert kernel_u(x + c, y + c, p) == pytest.approx(kernel_u(x, y, p), rel=1e-12)


class TestAttentionStep:
    def test_single_token_identity_at_zero_lam(self):
        x = np.array([[0.7, -1.2]])
        out = sparse_attention_step(x, params(0.0))
        np.testing.assert_array_equal(out, x)

    def test_weights_nonnegative_and_normalized(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(20, 3))
        w = attention_weights(x, params(1.5, beta=2.0, h=0.05))
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_lam_reduces_to_heat_kernel_attention(self):
        # lam = 0 leaves a pure Gaussian-kernel smoother: weights are the
        # normalized kernel exp(-beta |x_j - x_l|^2 / (4h)).
        rng = np.random.default_rng(3)
        x = rng.normal(size=(12, 2))
        p = params(0.0, beta=1.7, h=0.2)
        w = attention_weights(x, p)
        ref = np.exp(-p.beta * cdist(x, x, "sqeuclidean") / (4 * p.h))
        ref /= ref.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(w, ref, rtol=1e-12)
        out = sparse_attention_step(x, p)
        np.testing.assert_allclose(out, x + 0.5 * (x - ref @ x), rtol=1e-12)

    def test_matches_scalar_reimplementation(self):
        xs = np.array([0.8, -0.4, 1.5])
        p = params(1.0, beta=1.0, h=0.1)
        out = sparse_attention_step(xs.reshape(-1, 1), p).ravel()
        np.testing.assert_allclose(out, scalar_step_oracle(xs, 1.0, 1.0, 0.1), rtol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(9, 2))
        p = params(0.8, beta=1.2, h=0.15)
        perm = rng.permutation(9)
        np.testing.assert_allclose(sparse_attention_step(x[perm], p),
                                   sparse_attention_step(x, p)[perm], rtol=1e-12)

    def test_token_batch_wrapper(self):
        batch = TokenBatch(points=np.array([[1.0, 2.0]]), time_index=3)
        out = sparse_attention_step(batch, params(0.0))
        assert isinstance(out, TokenBatch)
        assert out.time_index == 3

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            sparse_attention_step(np.zeros((0, 2)), params(0.0))


class TestDivergence:
    def test_single_token_zero_lam(self):
        assert sparse_attention_divergence(np.array([[0.4, -0.9]]), params(0.0), j=0) == 0.0

    def test_matches_finite_differences_zero_lam(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 2))
        p = params(0.0, beta=1.3, h=0.2)
        div = sparse_attention_divergence(x, p)
        for j in range(6):
            assert div[j] == pytest.approx(fd_divergence(x, p, j), abs=1e-6)

    def test_matches_finite_differences_with_prior(self):
        # lam=1, h=0.1: keep every coordinate well clear of the kink at 0.1.
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5, 3))
        x[np.abs(x) < 0.25] += 0.3
        p = params(1.0, beta=1.0, h=0.1)
        assert (np.abs(np.abs(x) - 0.1) > 1e-3).all()
        div = sparse_attention_divergence(x, p)
        for j in range(5):
            assert div[j] == pytest.approx(fd_divergence(x, p, j), abs=1e-6)

    def test_shrink_part_contributes_half_d(self):
        # All coordinates outside the dead zone: the prox term alone adds
        # d/2 to the trace; verify by comparing against the same ensemble
        # with the prox derivative subtracted out via finite differences.
        rng = np.random.default_rng(7)
        x = np.sign(rng.normal(size=(4, 2))) * (0.5 + rng.random(size=(4, 2)))
        p = params(1.0, beta=1.0, h=0.1)
        div = sparse_attention_divergence(x, p)
        for j in range(4):
            assert div[j] == pytest.approx(fd_divergence(x, p, j), abs=1e-6)

    def test_matches_generic_forward_mode(self):
        # Independent route: per-token dual-number evaluation of the
        # restricted displacement map.
        rng = np.random.default_rng(8)
        x = rng.normal(size=(5, 2)) + 0.4
        p = params(0.7, beta=1.1, h=0.12)
        div = sparse_attention_divergence(x, p)
        for j in range(5):
            def disp_j(xj_node):
                rows = [ad.reshape(xj_node, (1, 2)) if l == j
                        else ad.constant(x[l:l + 1]) for l in range(5)]
                full = rows[0]
                for r in rows[1:]:
                    full = ad.concat_cols(ad.transpose(full), ad.transpose(r))
                    full = ad.transpose(full)
                stepped = sparse_attention_step(full, p)
                return ad.reshape(ad.getcols(stepped, 0, 2), (5, 2))

            trace = 0.0
            for i in range(2):
                e = np.zeros(2)
                e[i] = 1.0
                dv = ad.dual_eval(lambda v: disp_j(v), x[j], e)
                trace += dv.tangent[j, i] - e[i]
            assert div[j] == pytest.approx(trace, abs=1e-10)


class TestBaselineAttention:
    def test_zero_queries_give_uniform_mean(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(7, 2))
        v = rng.normal(size=(2, 2))
        att = BaselineAttention(q=np.zeros((3, 2)), k=np.zeros((3, 2)), v=v, h=0.3)
        out = baseline_attention_step(x, att)
        np.testing.assert_allclose(out, x + 0.3 * x.mean(axis=0) @ v.T, rtol=1e-12)

    def test_zero_values_identity(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(5, 2))
        att = BaselineAttention(q=rng.normal(size=(3, 2)), k=rng.normal(size=(3, 2)),
                                v=np.zeros((2, 2)), h=0.5)
        np.testing.assert_array_equal(baseline_attention_step(x, att), x)

    def test_random_instance_matches_direct_evaluation(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 2))
        q, k = rng.normal(size=(2, 3, 2))
        v = rng.normal(size=(2, 2))
        att = BaselineAttention(q=q, k=k, v=v, h=0.2)
        out = baseline_attention_step(x, att)
        for j in range(2):
            scores = np.array([np.dot(q @ x[j], k @ x[l]) for l in range(2)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            expected = x[j] + 0.2 * sum(w[l] * v @ x[l] for l in range(2))
            np.testing.assert_allclose(out[j], expected, rtol=1e-12)


class TestOracle1D:
    def test_zero_lam_matches_gaussian_convolution(self):
        rng = np.random.default_rng(12)
        samples = rng.normal(size=8)
        p = params(0.0, beta=1.5, h=0.2)
        var = 2 * p.h / p.beta
        xs = np.linspace(-2, 2, 9)
        dens, score = rwpo_kernel_1d(samples, xs, p)
        ref = np.mean(np.exp(-(xs[:, None] - samples) ** 2 / (2 * var))
                      / np.sqrt(2 * np.pi * var), axis=1)
        np.testing.assert_allclose(dens, ref, rtol=1e-7)
        eps = 1e-6

        def logref(pt):
            return np.log(np.mean(np.exp(-(pt - samples) ** 2 / (2 * var))
                                  / np.sqrt(2 * np.pi * var)))

        ref_score = [(logref(pt + eps) - logref(pt - eps)) / (2 * eps) for pt in xs]
        np.testing.assert_allclose(score, ref_score, atol=1e-4)

    def test_single_sample_score_at_origin(self):
        dens, score = rwpo_kernel_1d([0.0], 0.0, params(1.0, beta=1.0, h=0.1))
        assert dens > 0
        assert score == pytest.approx(0.0, abs=1e-4)

    def test_single_sample_gaussian_score(self):
        # One sample at zero with no prior: score(x) = -beta x / (2h).
        p = params(0.0, beta=2.0, h=0.25)
        for x in (0.5, -1.2):
            _, score = rwpo_kernel_1d([0.0], x, p)
            assert score == pytest.approx(-p.beta * x / (2 * p.h), rel=1e-4)

    def test_requires_1d(self):
        with pytest.raises(ValueError):
            rwpo_kernel_1d(np.zeros((3, 2)), 0.0, params(1.0))


class TestScoreConsistency:
    def test_attention_score_converges_to_oracle(self):
        rng = np.random.default_rng(0)
        samples = rng.normal(size=32)
        grid = np.concatenate([np.linspace(-2.7, -1.0, 7), np.linspace(1.0, 2.7, 7)])
        errors = []
        for h in (0.2, 0.1, 0.05, 0.025):
            p = params(1.0, beta=1.0, h=h)
            _, oracle = rwpo_kernel_1d(samples, grid, p)
            approx = attention_score_1d(grid, samples, p)
            errors.append(np.max(np.abs(approx - oracle)))
        assert all(errors[i + 1] < errors[i] for i in range(3))
        assert errors[-1] < 0.5 * errors[0]
