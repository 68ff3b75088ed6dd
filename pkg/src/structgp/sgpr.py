"""Exact GP regression on Cartesian-product inputs.

The covariance is ``K_xi ⊗ K_s1 ⊗ ... + β⁻¹ I``.  Every factor is
eigendecomposed once, after which the likelihood, its gradient and the
predictive moments cost a few Kronecker products.
"""
from dataclasses import dataclass, field

import numpy as np

from .kernels import Exponential, Kernel
from .kron import KronShapeError, kron_apply, kron_bilinear_grads, kron_eigbasis_trace_grads, kron_vec, sym_eig
from .optim import OptimSettings, maximize

LOG2PI = np.log(2.0 * np.pi)


@dataclass
class StructuredInputs:
    x_xi: np.ndarray
    x_s: list

    def __post_init__(self):
        self.x_xi = np.atleast_2d(np.asarray(self.x_xi, dtype=float))
        xs = []
        for f in self.x_s:
            f = np.asarray(f, dtype=float)
            xs.append(f[:, None] if f.ndim == 1 else f)
        if not xs or any(f.shape[0] == 0 for f in xs) or self.x_xi.shape[0] == 0:
            raise KronShapeError("structured inputs need non-empty factors")
        self.x_s = xs

    @property
    def sizes(self):
        return (self.x_xi.shape[0],) + tuple(f.shape[0] for f in self.x_s)

    @property
    def n_s(self):
        return int(np.prod([f.shape[0] for f in self.x_s]))

    @property
    def n(self):
        return int(np.prod(self.sizes))


@dataclass
class SgprCache:
    Q: list
    lam: np.ndarray
    QtY: np.ndarray
    grams: list


@dataclass
class SgprPrediction:
    mean: np.ndarray
    variance: np.ndarray = None
    covariance: np.ndarray = None


@dataclass
class SgprModel:
    inputs: StructuredInputs
    y: np.ndarray
    k_xi: Kernel
    k_s: list
    beta: float = 1.0
    cache: SgprCache = field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.y.shape[0] != self.inputs.n:
            raise KronShapeError(f"y has {self.y.shape[0]} rows, inputs describe {self.inputs.n}")
        if len(self.k_s) != len(self.inputs.x_s):
            raise KronShapeError("need one spatial kernel per spatial factor")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        self.rebuild()

    @property
    def kernels(self):
        return [self.k_xi] + list(self.k_s)

    @property
    def factor_inputs(self):
        return [self.inputs.x_xi] + list(self.inputs.x_s)

    def rebuild(self):
        grams = [k.gram(x) for k, x in zip(self.kernels, self.factor_inputs)]
        for g in grams:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("kernel matrix has non-finite entries")
        pairs = [sym_eig(g) for g in grams]
        Q = [p.Q for p in pairs]
        lam = np.maximum(kron_vec([p.lam for p in pairs]), 0.0)
        QtY = kron_apply([q.T for q in Q], self.y)
        self.cache = SgprCache(Q=Q, lam=lam, QtY=QtY, grams=grams)
        return self

    def get_params(self):
        return np.concatenate([k.get_params() for k in self.kernels] + [[np.log(self.beta)]])

    def set_params(self, p):
        p = np.asarray(p, dtype=float)
        i = 0
        for k in self.kernels:
            k.set_params(p[i:i + k.n_params])
            i += k.n_params
        self.beta = float(np.exp(p[i]))
        return self.rebuild()


def sgpr_log_likelihood(m):
    """Sum over output columns of log N(y_j | 0, K + β⁻¹I)."""
    c = m.cache
    d = c.lam + 1.0 / m.beta
    n, dy = m.y.shape
    return float(-0.5 * np.sum(c.QtY**2 / d[:, None]) - 0.5 * dy * np.sum(np.log(d)) - 0.5 * n * dy * LOG2PI)


def sgpr_log_likelihood_grad(m):
    """Gradient of :func:`sgpr_log_likelihood` w.r.t. ``m.get_params()``."""
    c = m.cache
    dinv = 1.0 / (c.lam + 1.0 / m.beta)
    dy = m.y.shape[1]
    alpha = kron_apply(c.Q, c.QtY * dinv[:, None])  # K_yy^{-1} Y
    # d/dK_f of  ½ Σ_j α_jᵀ K α_j - (d_y/2) tr(K_yy^{-1} K)
    fit = kron_bilinear_grads(c.grams, alpha, alpha)
    logdet = kron_eigbasis_trace_grads(c.Q, dinv, c.grams)
    grads = []
    for k, x, gf, gl in zip(m.kernels, m.factor_inputs, fit, logdet):
        G = 0.5 * gf - 0.5 * dy * gl
        grads.append(k.gram_vjp(x, x, G, symmetric=True)[1])
    dnoise = 0.5 * np.sum(alpha**2) - 0.5 * dy * np.sum(dinv)  # d/dβ⁻¹
    grads.append([-dnoise / m.beta])
    return np.concatenate(grads)


def sgpr_train(m, settings=None, callback=None):
    """Maximise the log-likelihood over log-hyperparameters; returns ``(m, result)``."""

    def fun(p):
        m.set_params(p)
        return sgpr_log_likelihood(m), sgpr_log_likelihood_grad(m)

    res = maximize(fun, m.get_params(), settings or OptimSettings(), callback=callback)
    m.set_params(res.x)
    return m, res


def _cross_factors(m, test):
    xs = [test.x_xi] + list(test.x_s)
    return [k.gram(xt, x) for k, xt, x in zip(m.kernels, xs, m.factor_inputs)]


def sgpr_predict(m, test, want=("mean", "marginal_variance"), include_noise=True):
    """Predictive mean, per-point variance and (single stochastic test point) covariance.

    Variances are shared across output columns and returned as ``(n*, d_y)``.
    """
    want = set(want)
    c = m.cache
    dinv = 1.0 / (c.lam + 1.0 / m.beta)
    Ks = _cross_factors(m, test)
    E = [k @ q for k, q in zip(Ks, c.Q)]
    out = SgprPrediction(mean=kron_apply(E, c.QtY * dinv[:, None]))
    noise = 1.0 / m.beta if include_noise else 0.0
    xs = [test.x_xi] + list(test.x_s)
    if "marginal_variance" in want:
        prior = kron_vec([k.kdiag(x) for k, x in zip(m.kernels, xs)])
        explained = kron_apply([e**2 for e in E], dinv)
        var = prior - explained + noise
        out.variance = np.repeat(var[:, None], m.y.shape[1], axis=1)
    if "full_covariance" in want:
        if test.x_xi.shape[0] != 1:
            raise ValueError("full covariance is only available for a single stochastic test point")
        out.covariance = _sgpr_covariance(m, test, E, dinv) + noise * np.eye(test.n_s)
    return out


def _sgpr_covariance(m, test, E, dinv):
    """Blockwise accumulation over the stochastic eigen-index."""
    e_xi = E[0][0]
    Es = _kron_all(E[1:])
    n_s = Es.shape[1]
    dsq = np.sqrt(dinv).reshape(-1, n_s)
    Sigma = np.zeros((Es.shape[0], Es.shape[0]))
    for i in range(e_xi.shape[0]):
        H = Es * dsq[i]
        Sigma -= e_xi[i] ** 2 * (H @ H.T)
    kss = m.k_xi.kdiag(test.x_xi)[0]
    Kss = _kron_all([k.gram(x) for k, x in zip(m.k_s, test.x_s)])
    return Sigma + kss * Kss


def _kron_all(mats):
    out = mats[0]
    for a in mats[1:]:
        out = np.kron(out, a)
    return out


def default_spatial_kernels(x_s, lengthscale=0.3):
    return [Exponential(np.asarray(f).reshape(len(f), -1).shape[1], lengthscale) for f in x_s]
