"""Surrogate model tests: kernels, posterior, likelihood, gradients.

Derived expectations are computed by independent oracles (dense inversion,
finite differences, eigendecomposition) living in this file.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mftbo import gp
from mftbo.grid import build_grid, make_point

ARCH = gp.FeatureMapConfig()


def random_params(seed, arch=ARCH):
    return gp.init_params(arch, seed)


def random_dataset(seed, n, noise_variance=0.83, n_levels=4):
    rng = np.random.default_rng(seed)
    grid = build_grid()
    data = gp.TaskDataset(noise_variance=noise_variance)
    for _ in range(n):
        x = grid[rng.integers(len(grid))]
        m = int(rng.integers(1, n_levels + 1))
        data.append(gp.ObservationRecord(x, m, float(rng.normal())))
    return data


# ---------------------------------------------------------------------------
# dense oracle: direct evaluation of the posterior equations


def dense_posterior(params, data, x_query, m_query):
    """Posterior mean/variance via explicit matrix inversion (no Cholesky)."""
    x, m, y = data.as_arrays()
    k = gp.joint_kernel_matrix(params, x, m)
    k_noisy = k + data.noise_variance * np.eye(len(y))
    k_inv = np.linalg.inv(k_noisy)
    feats_q = gp.feature_map(params, x_query)
    feats_t = gp.feature_map(params, x)
    d2 = np.sum((feats_q[:, None] - feats_t[None, :]) ** 2, axis=-1)
    g = params.fidelity_lengthscale
    k_star = np.exp(-d2 - g * (np.asarray(m_query, dtype=float)[:, None] - m[None, :]) ** 2)
    mean = k_star @ k_inv @ y
    var = 1.0 - np.einsum("qt,tu,qu->q", k_star, k_inv, k_star)
    return mean, var


def dense_lml(params, data):
    x, m, y = data.as_arrays()
    k = gp.joint_kernel_matrix(params, x, m) + data.noise_variance * np.eye(len(y))
    sign, logdet = np.linalg.slogdet(k)
    assert sign > 0
    t = len(y)
    return -0.5 * (t * np.log(2 * np.pi) + logdet + y @ np.linalg.inv(k) @ y)


# ---------------------------------------------------------------------------
# feature map


class TestFeatureMap:
    def test_zero_network_maps_to_zero(self):
        arch = ARCH
        zero = gp.KernelParams(arch, np.zeros((16, 2)), np.zeros(16),
                               np.zeros((4, 16)), np.zeros(4), 0.0)
        out = gp.feature_map(zero, np.array([0.3, 0.7]))
        assert_allclose(out, np.zeros(4))

    def test_deterministic(self):
        params = random_params(0)
        x = np.array([0.2, 0.9])
        assert_allclose(gp.feature_map(params, x), gp.feature_map(params, x))

    def test_jacobian_matches_finite_differences(self):
        params = random_params(1)
        x = np.array([[0.35, 0.6], [0.1, 0.95]])
        feats, jac = gp.feature_jacobian(params, x)
        assert_allclose(feats, gp.feature_map(params, x))
        flat = params.flatten()
        h = 1e-6
        rng = np.random.default_rng(2)
        for idx in rng.choice(ARCH.n_net_params, size=25, replace=False):
            fp = flat.copy(); fp[idx] += h
            fm = flat.copy(); fm[idx] -= h
            num = (gp.feature_map(gp.KernelParams.from_flat(ARCH, fp), x)
                   - gp.feature_map(gp.KernelParams.from_flat(ARCH, fm), x)) / (2 * h)
            assert_allclose(jac[:, :, idx], num, atol=1e-7)

    def test_nonfinite_weights_rejected(self):
        params = random_params(3)
        params.w1[0, 0] = np.nan
        with pytest.raises(gp.InvalidParamsError):
            gp.feature_map(params, np.array([0.5, 0.5]))

    def test_flatten_roundtrip_lossless(self):
        params = random_params(4)
        back = gp.KernelParams.from_flat(ARCH, params.flatten())
        assert np.array_equal(back.flatten(), params.flatten())


# ---------------------------------------------------------------------------
# kernels


class TestKernels:
    def test_input_kernel_same_point_is_one(self):
        params = random_params(5)
        x = make_point(-100.0, 0.7)
        assert gp.input_kernel(params, x, x) == 1.0

    def test_input_kernel_unit_distance(self):
        # engineered so ||psi(x) - psi(x')|| = 1: identity-ish output layer
        arch = gp.FeatureMapConfig(input_dim=2, hidden_width=2, feature_dim=1)
        # tanh is ~linear near 0; use large w2 to hit exact distance via b2 trick
        a = gp.KernelParams(arch, np.zeros((2, 2)), np.zeros(2),
                            np.zeros((1, 2)), np.array([0.0]), 0.0)
        b = gp.KernelParams(arch, np.zeros((2, 2)), np.zeros(2),
                            np.zeros((1, 2)), np.array([1.0]), 0.0)
        fa = gp.feature_map(a, np.array([0.5, 0.5]))
        fb = gp.feature_map(b, np.array([0.5, 0.5]))
        assert_allclose(np.sum((fa - fb) ** 2), 1.0)
        assert_allclose(np.exp(-np.sum((fa - fb) ** 2)), np.exp(-1.0))

    def test_fidelity_kernel_values(self):
        params = random_params(6)
        assert gp.fidelity_kernel(params, 3, 3) == 1.0
        unit = gp.KernelParams(ARCH, params.w1, params.b1, params.w2, params.b2, 0.0)
        assert_allclose(gp.fidelity_kernel(unit, 1, 2), np.exp(-1.0))
        half = gp.KernelParams(ARCH, params.w1, params.b1, params.w2, params.b2,
                               np.log(0.5))
        assert_allclose(gp.fidelity_kernel(half, 1, 4), np.exp(-4.5))

    def test_joint_kernel_product_and_symmetry(self):
        params = random_params(7)
        xa, xb = make_point(-60.0, 0.4), make_point(10.0, 0.9)
        v = gp.joint_kernel(params, xa, 1, xb, 3)
        assert_allclose(v, gp.input_kernel(params, xa, xb)
                        * gp.fidelity_kernel(params, 1, 3))
        assert gp.joint_kernel(params, xb, 3, xa, 1) == v
        assert gp.joint_kernel(params, xa, 2, xa, 2) == 1.0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gram_psd(self, seed):
        # eigen oracle on random mixed-fidelity point sets
        rng = np.random.default_rng(seed)
        params = random_params(seed + 10)
        x = rng.uniform(size=(6, 2))
        m = rng.integers(1, 5, size=6)
        gram = gp.joint_kernel_matrix(params, x, m)
        assert_allclose(gram, gram.T)
        assert np.linalg.eigvalsh(gram).min() >= -1e-10


# ---------------------------------------------------------------------------
# posterior


class TestPosterior:
    def test_empty_dataset_recovers_prior(self):
        params = random_params(8)
        post = gp.fit_posterior(params, gp.TaskDataset(noise_variance=0.83))
        mean, var = gp.posterior_mean_var(post, make_point(0.0, 0.5), 2)
        assert mean == 0.0
        assert var == 1.0

    def test_single_point_closed_form(self):
        # one observation y at (x0, m0): mean = y/(1+s2), var = 1 - 1/(1+s2)
        params = random_params(9)
        x0 = make_point(-20.0, 0.6)
        data = gp.TaskDataset(noise_variance=0.83)
        data.append(gp.ObservationRecord(x0, 2, 1.83))
        post = gp.fit_posterior(params, data)
        mean, var = gp.posterior_mean_var(post, x0, 2)
        assert_allclose(mean, 1.83 / 1.83, rtol=1e-9)
        assert_allclose(var, 1.0 - 1.0 / 1.83, rtol=1e-9)

    def test_matches_dense_oracle(self):
        grid = build_grid()
        rng = np.random.default_rng(11)
        for trial in range(5):
            params = random_params(100 + trial)
            data = random_dataset(200 + trial, n=20)
            post = gp.fit_posterior(params, data)
            xq = rng.uniform(size=(15, 2))
            mq = rng.integers(1, 5, size=15)
            mean, var = post.mean_var(xq, mq)
            mean_o, var_o = dense_posterior(params, data, xq, mq)
            assert_allclose(mean, mean_o, rtol=1e-8, atol=1e-10)
            assert_allclose(var, np.clip(var_o, gp.VARIANCE_FLOOR, 1.0),
                            rtol=1e-8, atol=1e-10)
        assert len(grid) == 912

    def test_interpolation_limit_small_noise(self):
        params = random_params(12)
        x0 = make_point(4.0, 0.8)
        data = gp.TaskDataset(noise_variance=1e-10)
        data.append(gp.ObservationRecord(x0, 1, 0.7))
        post = gp.fit_posterior(params, data)
        mean, _ = gp.posterior_mean_var(post, x0, 1)
        assert_allclose(mean, 0.7, atol=1e-6)

    def test_far_point_reverts_to_prior(self):
        # hand-built params with huge feature separation between two inputs
        arch = gp.FeatureMapConfig(input_dim=2, hidden_width=2, feature_dim=1)
        params = gp.KernelParams(arch, 100.0 * np.ones((2, 2)), np.zeros(2),
                                 np.array([[50.0, 50.0]]), np.zeros(1), 0.0)
        near = make_point(-202.0, 0.0)   # normalized (0, 0)
        far = make_point(24.0, 1.0)      # normalized (1, 1)
        data = gp.TaskDataset(noise_variance=0.5)
        data.append(gp.ObservationRecord(far, 1, 2.0))
        post = gp.fit_posterior(params, data)
        assert gp.joint_kernel(params, near, 1, far, 1) < 1e-10
        mean, var = gp.posterior_mean_var(post, near, 1)
        assert abs(mean) < 1e-9
        assert var > 1.0 - 1e-9

    def test_variance_shrinks_with_data(self):
        params = random_params(13)
        rng = np.random.default_rng(14)
        data = random_dataset(15, n=10)
        grown = gp.TaskDataset(noise_variance=data.noise_variance,
                               records=list(data.records))
        grown.append(gp.ObservationRecord(make_point(0.0, 0.5), 2, 0.3))
        post_a = gp.fit_posterior(params, data)
        post_b = gp.fit_posterior(params, grown)
        xq = rng.uniform(size=(30, 2))
        mq = rng.integers(1, 5, size=30)
        _, var_a = post_a.mean_var(xq, mq)
        _, var_b = post_b.mean_var(xq, mq)
        assert np.all(var_b <= var_a + 1e-10)

    def test_chol_reproduces_gram(self):
        params = random_params(16)
        data = random_dataset(17, n=12)
        post = gp.fit_posterior(params, data)
        x, m, _ = data.as_arrays()
        gram = gp.joint_kernel_matrix(params, x, m)
        gram[np.diag_indices_from(gram)] += data.noise_variance + post.jitter
        assert_allclose(post.chol_factor @ post.chol_factor.T, gram, rtol=1e-10)
        assert np.all(np.diag(post.chol_factor) > 0)


# ---------------------------------------------------------------------------
# marginal likelihood


class TestMarginalLikelihood:
    def test_scalar_closed_form(self):
        # t=1, y=0, unit prior variance: l = -0.5 (log 2pi + log(1 + s2))
        params = random_params(18)
        data = gp.TaskDataset(noise_variance=0.83)
        data.append(gp.ObservationRecord(make_point(0.0, 0.5), 1, 0.0))
        expected = -0.5 * (np.log(2 * np.pi) + np.log(1.83))
        assert_allclose(gp.log_marginal_likelihood(params, data), expected,
                        rtol=1e-9)

    def test_finite_for_valid_inputs(self):
        for seed in range(5):
            params = random_params(20 + seed)
            data = random_dataset(30 + seed, n=8)
            assert np.isfinite(gp.log_marginal_likelihood(params, data))

    def test_matches_dense_oracle(self):
        for seed in range(4):
            params = random_params(40 + seed)
            data = random_dataset(50 + seed, n=10)
            assert_allclose(gp.log_marginal_likelihood(params, data),
                            dense_lml(params, data), rtol=1e-8)

    def test_empty_dataset_rejected(self):
        params = random_params(19)
        with pytest.raises(ValueError):
            gp.log_marginal_likelihood(params, gp.TaskDataset(noise_variance=0.83))
        with pytest.raises(ValueError):
            gp.grad_log_marginal_likelihood(params, gp.TaskDataset(noise_variance=0.83))


class TestGradient:
    def fd_gradient(self, params, data, h=1e-5):
        flat = params.flatten()
        grad = np.empty_like(flat)
        for i in range(len(flat)):
            fp = flat.copy(); fp[i] += h
            fm = flat.copy(); fm[i] -= h
            grad[i] = (gp.log_marginal_likelihood(gp.KernelParams.from_flat(params.arch, fp), data)
                       - gp.log_marginal_likelihood(gp.KernelParams.from_flat(params.arch, fm), data)) / (2 * h)
        return grad

    def test_matches_finite_differences(self):
        for seed in range(3):
            params = random_params(60 + seed)
            data = random_dataset(70 + seed, n=8)
            grad = gp.grad_log_marginal_likelihood(params, data)
            fd = self.fd_gradient(params, data)
            assert np.linalg.norm(grad - fd) <= 1e-4 * np.linalg.norm(fd)

    def test_lengthscale_grad_zero_on_single_fidelity(self):
        params = random_params(63)
        data = gp.TaskDataset(noise_variance=0.5)
        rng = np.random.default_rng(64)
        grid = build_grid()
        for _ in range(6):
            data.append(gp.ObservationRecord(grid[rng.integers(len(grid))], 2,
                                             float(rng.normal())))
        grad = gp.grad_log_marginal_likelihood(params, data)
        assert grad[-1] == 0.0
