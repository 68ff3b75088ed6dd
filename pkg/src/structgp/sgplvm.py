"""Variational GP-LVM on Cartesian-product inputs with Kronecker-factored inducing points.

Training data ``y`` has one row per (realisation, spatial point) pair in
row-major order, realisations varying slowest.  The inducing inputs are
``z_xi × x_s``: spatial inducing inputs are tied to the training grid, so for
every spatial factor ``K_uu = K_uf = K_ff``.  With ``L_f`` the Cholesky factor
of factor ``f`` of ``K_uu`` and ``C_f = L_f⁻¹ Ψ2_f L_f⁻ᵀ = Q_f Λ_f Q_fᵀ``::

    K_ψ = β⁻¹K_uu + Ψ2 = L Q diag(d) Qᵀ Lᵀ,    d = β⁻¹ + ⊗Λ_f
    K_ψ⁻¹ = W diag(1/d) Wᵀ,                   W = ⊗ L_f⁻ᵀ Q_f

which is all the bound, its gradient and the predictive equations need.
"""
from dataclasses import dataclass, field

import numpy as np

from .kernels import Kernel, VariationalLatentPosterior, make_stochastic_kernel
from .kron import (
    chol,
    kron_apply,
    kron_bilinear_grads,
    kron_eigbasis_trace_grads,
    kron_vec,
    sym_eig,
    tri_solve,
)
from .optim import OptimSettings, maximize

LOG2PI = np.log(2.0 * np.pi)
GROUPS = ("latent", "inducing", "hyper", "beta")


@dataclass
class InducingInputs:
    z_xi: np.ndarray
    z_s: list


@dataclass
class SgplvmModel:
    y: np.ndarray
    x_s: list
    q: VariationalLatentPosterior
    z_xi: np.ndarray
    k_xi: Kernel
    k_s: list
    beta: float
    frozen: frozenset = frozenset()
    xi_jitter: float = 1e-6

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        self.x_s = [np.asarray(x, dtype=float).reshape(len(x), -1) for x in self.x_s]
        self.z_xi = np.atleast_2d(np.asarray(self.z_xi, dtype=float))
        self.frozen = frozenset(self.frozen)
        if not self.frozen <= set(GROUPS):
            raise ValueError(f"unknown parameter groups {sorted(self.frozen - set(GROUPS))}")
        if self.y.shape[0] != self.n_xi * self.n_s:
            raise ValueError(f"y has {self.y.shape[0]} rows; expected n_xi*n_s = {self.n_xi * self.n_s}")
        if self.z_xi.shape[1] != self.q.mu.shape[1]:
            raise ValueError("inducing inputs and latents disagree on d_xi")
        if len(self.k_s) != len(self.x_s):
            raise ValueError("need one spatial kernel per spatial factor")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    n_xi = property(lambda self: self.q.mu.shape[0])
    d_xi = property(lambda self: self.q.mu.shape[1])
    m_xi = property(lambda self: self.z_xi.shape[0])
    n_s = property(lambda self: int(np.prod([len(x) for x in self.x_s])))
    d_y = property(lambda self: self.y.shape[1])

    @property
    def inducing(self):
        return InducingInputs(self.z_xi, self.x_s)

    def copy(self):
        return SgplvmModel(self.y.copy(), [x.copy() for x in self.x_s], self.q.copy(), self.z_xi.copy(),
                           self.k_xi.copy(), [k.copy() for k in self.k_s], self.beta, self.frozen, self.xi_jitter)

    # -- parameter packing: [mu, log s, z_xi, k_xi, k_s..., log beta]
    def _sizes(self):
        return [self.q.mu.size, self.q.s.size, self.z_xi.size, self.k_xi.n_params,
                *[k.n_params for k in self.k_s], 1]

    def get_params(self):
        return np.concatenate([self.q.mu.ravel(), np.log(self.q.s).ravel(), self.z_xi.ravel(),
                               self.k_xi.get_params(), *[k.get_params() for k in self.k_s], [np.log(self.beta)]])

    def set_params(self, p):
        parts = np.split(np.asarray(p, dtype=float), np.cumsum(self._sizes())[:-1])
        # frozen groups are never written, so they stay bit-identical
        shape = self.q.mu.shape
        if "latent" not in self.frozen:
            self.q = VariationalLatentPosterior(parts[0].reshape(shape), np.exp(parts[1]).reshape(shape))
        if "inducing" not in self.frozen:
            self.z_xi = parts[2].reshape(self.z_xi.shape)
        if "hyper" not in self.frozen:
            self.k_xi.set_params(parts[3])
            for k, pk in zip(self.k_s, parts[4:-1]):
                k.set_params(pk)
        if "beta" not in self.frozen:
            self.beta = float(np.exp(parts[-1][0]))
        return self

    def group_mask(self):
        """Boolean mask over ``get_params()``: True where the group is trainable."""
        sz = self._sizes()
        groups = ["latent", "latent", "inducing", "hyper"] + ["hyper"] * len(self.k_s) + ["beta"]
        return np.concatenate([np.full(n, g not in self.frozen) for n, g in zip(sz, groups)])


@dataclass
class BoundCache:
    L: list
    Q: list
    lam_f: list
    d: np.ndarray
    B: np.ndarray
    kuu: list
    psi2: list
    psi1_xi: np.ndarray
    psi0: float
    trC: float
    psi0_s: float
    jitters: list = field(default_factory=list)

    @property
    def W(self):
        """Per-factor ``L_f⁻ᵀ Q_f``."""
        return [tri_solve(L, Q, trans=True) for L, Q in zip(self.L, self.Q)]

    def alpha(self):
        """``K_ψ⁻¹ Ψ1ᵀ Y`` as an ``m × d_y`` matrix."""
        return kron_apply(self.W, self.B / self.d[:, None])


def latent_prior_kl(q):
    mu, s = q.mu, q.s
    if np.any(s <= 0):
        raise ValueError("latent variances must be positive")
    return float(0.5 * np.sum(s - np.log(s) + mu**2 - 1.0))


def build_cache(m):
    psi = m.k_xi.psi(m.q, m.z_xi)
    if not (np.isfinite(psi.psi0) and np.all(np.isfinite(psi.psi1)) and np.all(np.isfinite(psi.psi2))):
        raise FloatingPointError("non-finite ψ-statistics")
    kuu_xi = m.k_xi.gram(m.z_xi) + m.xi_jitter * np.eye(m.m_xi)
    K_s = [k.gram(x) for k, x in zip(m.k_s, m.x_s)]
    kuu = [kuu_xi] + K_s
    psi2 = [psi.psi2] + [K @ K for K in K_s]
    chols = [chol(kuu_xi, name="K_uu (stochastic)")] + [chol(K, name=f"K_s[{i}]") for i, K in enumerate(K_s)]
    L = [c.L for c in chols]
    C_xi = tri_solve(L[0], tri_solve(L[0], psi.psi2).T).T
    Cs = [C_xi] + [Lk.T @ Lk for Lk in L[1:]]
    pairs = [sym_eig(C) for C in Cs]
    lam_f = [np.maximum(p.lam, 0.0) for p in pairs]
    Q = [p.Q for p in pairs]
    d = 1.0 / m.beta + kron_vec(lam_f)
    G = [Q[0].T @ tri_solve(L[0], psi.psi1.T)] + [q.T @ Lk.T for q, Lk in zip(Q[1:], L[1:])]
    B = kron_apply(G, m.y)
    psi0_s = float(np.prod([k.kdiag(x).sum() for k, x in zip(m.k_s, m.x_s)]))
    trC = float(np.prod([lam.sum() for lam in lam_f]))
    return BoundCache(L=L, Q=Q, lam_f=lam_f, d=d, B=B, kuu=kuu, psi2=psi2, psi1_xi=psi.psi1,
                      psi0=psi.psi0 * psi0_s, trC=trC, psi0_s=psi0_s, jitters=[c.jitter for c in chols])


def collapsed_bound_per_dim(m, cache=None):
    """Returns ``(L_j for each output column, KL)``; the bound is ``sum(L_j) - KL``."""
    c = cache or build_cache(m)
    n = m.y.shape[0]
    mm = c.d.size
    b = m.beta
    shared = 0.5 * ((n - mm) * np.log(b) - n * LOG2PI - np.sum(np.log(c.d))) - 0.5 * b * (c.psi0 - c.trC)
    fit = np.sum(c.B**2 / c.d[:, None], axis=0)
    Lj = shared - 0.5 * b * (np.sum(m.y**2, axis=0) - fit)
    return Lj, latent_prior_kl(m.q)


def collapsed_bound(m):
    c = build_cache(m)
    Lj, kl = collapsed_bound_per_dim(m, c)
    return float(np.sum(Lj) - kl), c


def bound_gradients(m, cache=None):
    """Gradient of :func:`collapsed_bound` w.r.t. ``m.get_params()``; frozen groups are zero."""
    c = cache or build_cache(m)
    b = m.beta
    dy = m.d_y
    n = m.y.shape[0]
    mm = c.d.size
    dinv = 1.0 / c.d
    W = c.W
    alpha = kron_apply(W, c.B / c.d[:, None])
    kuu_inv = [tri_solve(L, tri_solve(L, np.eye(len(L))), trans=True) for L in c.L]
    tr_kinv_p2 = [np.sum(ki * p2) for ki, p2 in zip(kuu_inv, c.psi2)]
    n_f = len(c.kuu)

    def prod_except(vals, f):
        return float(np.prod([v for g, v in enumerate(vals) if g != f]))

    # adjoints on the Kronecker factors of Ψ2 and K_uu
    eb_p2 = kron_eigbasis_trace_grads(W, dinv, c.psi2)
    bl_p2 = kron_bilinear_grads(c.psi2, alpha, alpha)
    eb_kuu = kron_eigbasis_trace_grads(W, dinv, c.kuu)
    bl_kuu = kron_bilinear_grads(c.kuu, alpha, alpha)
    g_p2, g_kuu = [], []
    for f in range(n_f):
        trace_rest = prod_except(tr_kinv_p2, f)
        g_p2.append(-0.5 * dy * eb_p2[f] - 0.5 * b * bl_p2[f] + 0.5 * b * dy * trace_rest * kuu_inv[f])
        m_rest = mm / len(c.kuu[f])
        kpk = kuu_inv[f] @ c.psi2[f] @ kuu_inv[f]
        g_kuu.append((-0.5 * dy * eb_kuu[f] - 0.5 * b * bl_kuu[f]) / b
                     + 0.5 * dy * m_rest * kuu_inv[f] - 0.5 * b * dy * trace_rest * kpk)
    psi1_f = [c.psi1_xi] + c.kuu[1:]
    g_p1 = [b * g for g in kron_bilinear_grads(psi1_f, m.y, alpha)]

    # stochastic factor: ψ-statistics and K_uu(z)
    g0 = -0.5 * b * dy * c.psi0_s
    pg = m.k_xi.psi_vjp(m.q, m.z_xi, g0, g_p1[0], g_p2[0])
    dz_kuu, dp_kuu = m.k_xi.gram_vjp(m.z_xi, m.z_xi, g_kuu[0], symmetric=True)
    dmu = pg.dmu - m.q.mu
    ds = pg.ds - 0.5 * (1.0 - 1.0 / m.q.s)
    dz = pg.dZ + dz_kuu
    dk_xi = pg.dparams + dp_kuu

    # spatial factors: K appears as K_uu, Ψ1 and inside Ψ2 = K K
    psi0_xi = c.psi0 / c.psi0_s
    dk_s = []
    for f in range(1, n_f):
        K = c.kuu[f]
        G = g_kuu[f] + g_p1[f] + g_p2[f] @ K + K @ g_p2[f]
        x = m.x_s[f - 1]
        k = m.k_s[f - 1]
        grad = k.gram_vjp(x, x, G, symmetric=True)[1]
        # ψ0 depends on the spatial kernel diagonal
        diag_sum = k.kdiag(x).sum()
        if diag_sum > 0:
            grad = grad + g0 * psi0_xi * (c.psi0_s / diag_sum) * k.gram_vjp(x, x, np.eye(len(x)), symmetric=True)[1]
        dk_s.append(grad)

    # explicit β dependence
    akua = np.sum(alpha * kron_apply(c.kuu, alpha))
    T = np.sum(c.B**2 / c.d[:, None])
    dbeta = (dy * (n - mm) / (2 * b) - 0.5 * np.sum(m.y**2) + 0.5 * T - 0.5 * dy * (c.psi0 - c.trC)
             - (-0.5 * dy * np.sum(dinv) - 0.5 * b * akua) / b**2)
    g = np.concatenate([dmu.ravel(), (ds * m.q.s).ravel(), dz.ravel(), dk_xi, *dk_s, [dbeta * b]])
    return g * m.group_mask()


@dataclass
class QuPosterior:
    """Optimal q(U): mean ``m × d_y`` and covariance ``β⁻¹ V diag(1/d) Vᵀ`` with ``V = ⊗ L_f Q_f``."""

    mean: np.ndarray
    V: list
    scale: np.ndarray

    def covariance(self):
        Vd = _kron_all(self.V)
        return (Vd * self.scale) @ Vd.T


def optimal_qu(m, cache=None):
    c = cache or build_cache(m)
    alpha = c.alpha()
    return QuPosterior(mean=kron_apply(c.kuu, alpha), V=[L @ Q for L, Q in zip(c.L, c.Q)],
                       scale=1.0 / (m.beta * c.d))


def _kron_all(mats):
    out = mats[0]
    for a in mats[1:]:
        out = np.kron(out, a)
    return out


# ------------------------------------------------------------------ training


def pca_latents(y, n_xi, d_xi, rng=None, return_fracs=False):
    """PCA scores of the realisation matrix, scaled to unit column variance.

    With ``return_fracs`` also returns each retained component's share of the
    total variance (padding columns get the smallest retained share).
    """
    R = y.reshape(n_xi, -1)
    R = R - R.mean(axis=0)
    U, sv, _ = np.linalg.svd(R, full_matrices=False)
    k = min(d_xi, int(np.sum(sv > 1e-10 * max(sv[0], 1e-300))))
    mu = np.zeros((n_xi, d_xi))
    mu[:, :k] = U[:, :k] * sv[:k]
    if k < d_xi:
        rng = rng or np.random.default_rng(0)
        mu[:, k:] = 1e-2 * rng.standard_normal((n_xi, d_xi - k))
    sd = mu.std(axis=0)
    mu = mu / np.where(sd > 0, sd, 1.0)
    if not return_fracs:
        return mu
    energy = sv**2 / max(np.sum(sv**2), 1e-300)
    fracs = np.full(d_xi, energy[k - 1] if k else 1.0)
    fracs[:k] = energy[:k]
    return mu, np.maximum(fracs, 1e-12)


def init_sgplvm(y, x_s, n_xi, d_xi=None, m_xi=None, kernel="rbf", k_s=None, rng=None, s_init=0.1,
                spatial_lengthscale=0.3, frozen=()):
    """Model with PCA latents, inducing inputs drawn from the latent means and β = 100/var(y)."""
    from .kernels import Exponential

    rng = rng if rng is not None else np.random.default_rng(0)
    y = np.asarray(y, dtype=float)
    y = y[:, None] if y.ndim == 1 else y
    d_xi = d_xi or max(1, min(n_xi // 2, 128))
    m_xi = m_xi or max(1, min(n_xi // 2, 128))
    mu, fracs = pca_latents(y, n_xi, d_xi, rng, return_fracs=True)
    q = VariationalLatentPosterior(mu, np.full_like(mu, s_init))
    z = mu[np.sort(rng.choice(n_xi, size=min(m_xi, n_xi), replace=False))].copy()
    if m_xi > n_xi:
        z = np.vstack([z, rng.standard_normal((m_xi - n_xi, d_xi))])
    var_y = float(np.var(y))
    k_xi = kernel if isinstance(kernel, Kernel) else make_stochastic_kernel(
        kernel, d_xi, lengthscales=ARD_INIT(d_xi, fracs), variance=var_y, linear_variance=var_y / d_xi)
    if k_s is None:
        k_s = [Exponential(np.asarray(x).reshape(len(x), -1).shape[1], spatial_lengthscale) for x in x_s]
    return SgplvmModel(y, x_s, q, z, k_xi, k_s, beta=100.0 / var_y, frozen=frozenset(frozen))


def ARD_INIT(d_xi, fracs):
    return np.sqrt(d_xi) * np.sqrt(fracs.max() / fracs)


@dataclass
class TrainResult:
    bound: float
    initial_bound: float
    n_iter: int
    converged: bool
    log: list


def sgplvm_train(m, settings=None, callback=None):
    """Maximise the collapsed bound over all unfrozen parameter groups (in place)."""
    mask = m.group_mask()
    full = m.get_params()
    init = collapsed_bound(m)[0]
    if not np.isfinite(init):
        raise FloatingPointError("bound is not finite at initialisation")
    if not mask.any():
        return m, TrainResult(init, init, 0, True, [])

    def fun(p):
        x = full.copy()
        x[mask] = p
        m.set_params(x)
        val, c = collapsed_bound(m)
        return val, bound_gradients(m, c)[mask]

    res = maximize(fun, full[mask], settings or OptimSettings(), callback=callback)
    x = full.copy()
    x[mask] = res.x
    m.set_params(x)
    final = collapsed_bound(m)[0]
    return m, TrainResult(final, init, res.n_iter, res.converged, res.log)
