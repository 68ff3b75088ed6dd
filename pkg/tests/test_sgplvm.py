import tracemalloc

import numpy as np
import pytest

from oracles import (
    dense_collapsed_bound,
    dense_optimal_qu,
    dense_sgpr_loglik,
    dense_uncollapsed_bound,
    kl_diag_gauss,
    random_stochastic_kernel,
)
from structgp.kernels import RBF, Exponential, VariationalLatentPosterior
from structgp.optim import OptimSettings
from structgp.sgplvm import (
    GROUPS,
    SgplvmModel,
    bound_gradients,
    collapsed_bound,
    collapsed_bound_per_dim,
    init_sgplvm,
    latent_prior_kl,
    optimal_qu,
    sgplvm_train,
)
from structgp.sgpr import SgprModel, StructuredInputs


def tiny_model(rng, n_xi=4, grid=(3, 3), m_xi=2, d_xi=2, dy=2, family=None):
    family = family or str(rng.choice(["rbf", "linear", "sum"]))
    x_s = [np.sort(rng.uniform(0, 1, g))[:, None] for g in grid]
    n = n_xi * int(np.prod(grid))
    q = VariationalLatentPosterior(rng.standard_normal((n_xi, d_xi)), rng.uniform(0.05, 0.8, (n_xi, d_xi)))
    return SgplvmModel(
        y=rng.standard_normal((n, dy)),
        x_s=x_s,
        q=q,
        z_xi=rng.standard_normal((m_xi, d_xi)),
        k_xi=random_stochastic_kernel(rng, family, d_xi),
        k_s=[Exponential(1, rng.uniform(0.2, 0.9)) for _ in grid],
        beta=rng.uniform(2.0, 30.0),
        xi_jitter=1e-6,
    )


def relerr(a, b):
    return abs(a - b) / abs(b)


# ------------------------------------------------------------------ KL


def test_kl_examples():
    q = VariationalLatentPosterior(np.zeros((3, 2)), np.ones((3, 2)))
    assert latent_prior_kl(q) == 0.0
    assert latent_prior_kl(VariationalLatentPosterior([[1.0]], [[1.0]])) == pytest.approx(0.5)
    rng = np.random.default_rng(0)
    mu, s = rng.standard_normal((5, 3)), rng.uniform(0.1, 2, (5, 3))
    assert relerr(latent_prior_kl(VariationalLatentPosterior(mu, s)), kl_diag_gauss(mu, s)) < 1e-12


# ------------------------------------------------------------------ bound values


@pytest.mark.parametrize("family", ["rbf", "linear", "sum"])
def test_collapsed_bound_dense_oracle(family):
    rng = np.random.default_rng(1)
    for _ in range(3):
        m = tiny_model(rng, family=family)
        val, _ = collapsed_bound(m)
        assert relerr(val, dense_collapsed_bound(m)) < 1e-10


def test_collapsed_bound_two_spatial_factors_and_one():
    rng = np.random.default_rng(2)
    for grid in [(3,), (2, 3), (3, 3)]:
        m = tiny_model(rng, n_xi=3, grid=grid, m_xi=3)
        assert relerr(collapsed_bound(m)[0], dense_collapsed_bound(m)) < 1e-10


def test_per_dim_sum():
    rng = np.random.default_rng(3)
    m = tiny_model(rng, dy=3)
    Lj, kl = collapsed_bound_per_dim(m)
    assert relerr(np.sum(Lj) - kl, collapsed_bound(m)[0]) < 1e-10
    m1 = tiny_model(rng, dy=1)
    Lj, kl = collapsed_bound_per_dim(m1)
    assert Lj[0] == pytest.approx(collapsed_bound(m1)[0] + kl, rel=1e-12)
    m.y[:, 1] = m.y[:, 0]
    Lj, _ = collapsed_bound_per_dim(m)
    assert Lj[0] == pytest.approx(Lj[1], rel=1e-12)


def test_zero_data():
    rng = np.random.default_rng(4)
    m = tiny_model(rng)
    m.y[:] = 0.0
    val, c = collapsed_bound(m)
    assert np.all(c.B == 0)
    assert relerr(val, dense_collapsed_bound(m)) < 1e-10
    np.testing.assert_array_equal(optimal_qu(m).mean, 0.0)


def test_titsias_collapse_to_exact_gp():
    rng = np.random.default_rng(5)
    n_xi, d_xi = 4, 2
    mu = rng.standard_normal((n_xi, d_xi))
    x_s = [np.linspace(0, 1, 3)[:, None]]
    k = RBF(d_xi, 1.2, [0.9, 1.4])
    ks = [Exponential(1, 0.5)]
    y = rng.standard_normal((n_xi * 3, 2))
    m = SgplvmModel(y, x_s, VariationalLatentPosterior(mu, np.full_like(mu, 1e-12)), mu.copy(), k, ks,
                    beta=5.0, xi_jitter=0.0)
    exact = dense_sgpr_loglik(SgprModel(StructuredInputs(mu, x_s), y, k, ks, beta=5.0))
    bound, _ = collapsed_bound(m)
    assert abs(bound + latent_prior_kl(m.q) - exact) < 1e-6
    assert bound <= exact


def test_permutation_invariance():
    rng = np.random.default_rng(6)
    m = tiny_model(rng, n_xi=4, grid=(3, 2))
    perm = rng.permutation(4)
    m2 = m.copy()
    m2.q = VariationalLatentPosterior(m.q.mu[perm], m.q.s[perm])
    m2.y = m.y.reshape(4, 6, -1)[perm].reshape(24, -1)
    assert relerr(collapsed_bound(m2)[0], collapsed_bound(m)[0]) < 1e-10


# ------------------------------------------------------------------ q(U)


@pytest.mark.parametrize("family", ["rbf", "linear", "sum"])
def test_optimal_qu_and_uncollapsed_consistency(family):
    rng = np.random.default_rng(7)
    m = tiny_model(rng, family=family, m_xi=3)
    qu = optimal_qu(m)
    U, S = dense_optimal_qu(m)
    assert np.linalg.norm(qu.mean - U) / np.linalg.norm(U) < 1e-10
    assert np.linalg.norm(qu.covariance() - S) / np.linalg.norm(S) < 1e-10
    un = dense_uncollapsed_bound(m, qu.mean, qu.covariance())
    assert relerr(un, collapsed_bound(m)[0]) < 1e-8


def test_optimal_qu_interpolation_limit():
    rng = np.random.default_rng(8)
    mu = rng.standard_normal((3, 1))
    x_s = [np.linspace(0, 1, 3)[:, None]]
    y = rng.standard_normal((9, 1))
    m = SgplvmModel(y, x_s, VariationalLatentPosterior(mu, np.full_like(mu, 1e-12)), mu.copy(),
                    RBF(1, 1.0, 1.0), [Exponential(1, 0.5)], beta=1e8, xi_jitter=0.0)
    np.testing.assert_allclose(optimal_qu(m).mean, y, atol=1e-3)


# ------------------------------------------------------------------ gradients


def fd_grad(m, idx, h=1e-5):
    p0 = m.get_params()
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        e = np.zeros_like(p0)
        e[i] = h
        out[k] = (collapsed_bound(m.set_params(p0 + e))[0] - collapsed_bound(m.set_params(p0 - e))[0]) / (2 * h)
    m.set_params(p0)
    return out


@pytest.mark.parametrize("family", ["rbf", "linear", "sum"])
def test_gradients_finite_differences(family):
    rng = np.random.default_rng(9)
    # m_xi <= d_xi keeps the linear-kernel K_uu full rank; otherwise the true
    # z-gradient is of the order of the jitter and drowns in roundoff
    m = tiny_model(rng, family=family, n_xi=4, grid=(3, 2), m_xi=3, d_xi=3)
    g = bound_gradients(m)
    num = fd_grad(m, range(len(g)))
    mask = np.abs(num) > 1e-6
    np.testing.assert_allclose(g[mask], num[mask], rtol=1e-4)


def test_frozen_groups_zero_gradient():
    rng = np.random.default_rng(10)
    m = tiny_model(rng)
    m.frozen = frozenset(GROUPS)
    np.testing.assert_array_equal(bound_gradients(m), 0.0)
    m.frozen = frozenset({"latent"})
    g = bound_gradients(m)
    assert np.all(g[: 2 * m.q.mu.size] == 0) and np.any(g[2 * m.q.mu.size:] != 0)


def test_duplicated_columns_double_hyper_gradient():
    rng = np.random.default_rng(11)
    m1 = tiny_model(rng, dy=1, family="rbf")
    m2 = m1.copy()
    m2.y = np.hstack([m1.y, m1.y])
    k0 = 2 * m1.q.mu.size + m1.z_xi.size
    g1 = bound_gradients(m1)
    g2 = bound_gradients(m2)
    # the KL gradient lives only in the latent block, so hyperparameter gradients double exactly
    np.testing.assert_allclose(g2[k0:-1], 2 * g1[k0:-1], rtol=1e-9)


# ------------------------------------------------------------------ training


def _latent_rbf_data(rng, n_xi=24, grid=(6,), d_true=2, noise=1e-2):
    x_true = rng.standard_normal((n_xi, d_true))
    x_s = [np.linspace(0, 1, g)[:, None] for g in grid]
    K = np.kron(RBF(d_true, 1.0, 1.0).gram(x_true), Exponential(1, 0.4).gram(x_s[0]))
    y = np.linalg.cholesky(K + 1e-8 * np.eye(len(K))) @ rng.standard_normal(len(K))
    return (y + np.sqrt(noise) * rng.standard_normal(len(K)))[:, None], x_s


def test_training_improves_and_is_monotone():
    rng = np.random.default_rng(12)
    y, x_s = _latent_rbf_data(rng)
    m = init_sgplvm(y, x_s, 24, d_xi=3, m_xi=8, kernel="rbf", rng=rng)
    m, res = sgplvm_train(m, OptimSettings(max_iter=150))
    assert res.bound >= res.initial_bound
    vals = [r["bound"] for r in res.log]
    assert all(b >= a - 1e-8 * abs(a) for a, b in zip(vals, vals[1:]))
    assert {"iteration", "bound", "grad_norm", "step_size"} <= set(res.log[0])


def test_training_frozen_latents_unchanged():
    rng = np.random.default_rng(13)
    y, x_s = _latent_rbf_data(rng, n_xi=10)
    m = init_sgplvm(y, x_s, 10, d_xi=2, m_xi=4, kernel="linear", rng=rng, frozen={"latent"})
    mu, s = m.q.mu.copy(), m.q.s.copy()
    sgplvm_train(m, OptimSettings(max_iter=30))
    np.testing.assert_array_equal(m.q.mu, mu)
    np.testing.assert_array_equal(m.q.s, s)


def test_resume_is_stationary():
    rng = np.random.default_rng(14)
    y, x_s = _latent_rbf_data(rng, n_xi=12)
    m = init_sgplvm(y, x_s, 12, d_xi=2, m_xi=4, kernel="rbf", rng=rng)
    m, res = sgplvm_train(m, OptimSettings(max_iter=2000))
    m, res2 = sgplvm_train(m, OptimSettings(max_iter=50))
    assert abs(res2.bound - res.bound) < 1e-6 * max(1.0, abs(res.bound)) or res2.bound >= res.bound


@pytest.mark.slow
def test_ard_prunes_excess_dimensions():
    pruned = []
    for seed in range(5):
        rng = np.random.default_rng(500 + seed)
        y, x_s = _latent_rbf_data(rng, n_xi=40, grid=(5,), noise=1e-3)
        m = init_sgplvm(y, x_s, 40, d_xi=8, m_xi=20, kernel="rbf", rng=rng)
        sgplvm_train(m, OptimSettings(max_iter=1000))
        ls = np.sort(m.k_xi.lengthscales)
        pruned.append(int(np.sum(ls > 10 * ls[1])))
    assert np.mean(pruned) >= 6


def test_no_dense_n_by_n_allocation():
    rng = np.random.default_rng(15)
    n_xi, g = 20, 24
    x_s = [np.linspace(0, 1, g)[:, None]] * 2
    n = n_xi * g * g
    assert n > 10**4
    m = SgplvmModel(rng.standard_normal((n, 1)), x_s,
                    VariationalLatentPosterior(rng.standard_normal((n_xi, 2)), np.full((n_xi, 2), 0.1)),
                    rng.standard_normal((5, 2)), RBF(2, 1.0, 1.0), [Exponential(1, 0.3), Exponential(1, 0.3)],
                    beta=10.0)
    tracemalloc.start()
    val, c = collapsed_bound(m)
    bound_gradients(m, c)
    optimal_qu(m, c)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert np.isfinite(val)
    assert peak < 0.05 * n * n * 8
