"""Kernel functions, kernel expectations (ψ-statistics) and their gradients.

Hyperparameters are stored as plain positive floats/arrays and exposed to
optimisers through ``get_params``/``set_params`` in log space.  Gradients are
reverse-mode: every ``*_vjp`` method takes adjoints of the outputs and returns
gradients with respect to the inputs and the log-hyperparameters.
"""
from dataclasses import dataclass

import numpy as np

from . import _psi_kernels as hot


@dataclass
class VariationalLatentPosterior:
    """Diagonal Gaussian posterior over latent inputs: means and variances."""

    mu: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.s = np.atleast_2d(np.asarray(self.s, dtype=float))
        if self.mu.shape != self.s.shape:
            raise ValueError(f"mu {self.mu.shape} and s {self.s.shape} differ in shape")
        if np.any(self.s <= 0.0):
            raise ValueError("latent posterior variances must be strictly positive")

    @property
    def shape(self):
        return self.mu.shape

    def copy(self):
        return VariationalLatentPosterior(self.mu.copy(), self.s.copy())


@dataclass
class PsiStats:
    psi0: float
    psi1: np.ndarray
    psi2: np.ndarray


@dataclass
class PsiGrads:
    dmu: np.ndarray
    ds: np.ndarray
    dZ: np.ndarray
    dparams: np.ndarray


def _sqdist(X1, X2):
    return ((X1[:, None, :] - X2[None, :, :]) ** 2).sum(axis=2)


def _check_cols(X, d, who):
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"{who}: inputs with shape {X.shape} do not match kernel input_dim={d}")


class Kernel:
    input_dim = None

    def gram(self, X1, X2=None):
        raise NotImplementedError

    def kdiag(self, X):
        raise NotImplementedError

    @property
    def n_params(self):
        return self.get_params().size

    def psi(self, q, Z):
        raise NotImplementedError(f"{type(self).__name__} has no kernel expectations")

    def copy(self):
        k = type(self).__new__(type(self))
        k.__dict__.update({key: np.copy(v) if isinstance(v, np.ndarray) else v
                           for key, v in self.__dict__.items()})
        return k


class RBF(Kernel):
    """ARD squared-exponential: ``var * exp(-0.5 * sum_q (x_q - y_q)^2 / l_q^2)``."""

    family = "rbf_ard"

    def __init__(self, input_dim, variance=1.0, lengthscales=1.0):
        self.input_dim = int(input_dim)
        self.variance = float(variance)
        self.lengthscales = np.broadcast_to(np.asarray(lengthscales, dtype=float),
                                            (self.input_dim,)).copy()
        if self.variance <= 0 or np.any(self.lengthscales <= 0):
            raise ValueError("RBF hyperparameters must be positive")

    def get_params(self):
        return np.concatenate([[np.log(self.variance)], np.log(self.lengthscales)])

    def set_params(self, p):
        self.variance = float(np.exp(p[0]))
        self.lengthscales = np.exp(np.asarray(p[1:], dtype=float))

    def gram(self, X1, X2=None):
        X2 = X1 if X2 is None else X2
        _check_cols(X1, self.input_dim, "gram")
        _check_cols(X2, self.input_dim, "gram")
        ls = self.lengthscales
        return self.variance * np.exp(-0.5 * _sqdist(X1 / ls, X2 / ls))

    def kdiag(self, X):
        return np.full(X.shape[0], self.variance)

    def gram_vjp(self, X1, X2, G, symmetric=False):
        """Gradients of ``sum(G * gram(X1, X2))``.

        Returns ``(dX1, dlogparams)``; with ``symmetric`` the input gradient
        accounts for ``X2`` being the same array as ``X1``.
        """
        K = self.gram(X1, X2)
        W = G * K
        ls2 = self.lengthscales**2
        diff = X1[:, None, :] - X2[None, :, :]
        dls2 = np.einsum("ab,abq->q", W, diff**2) / (2.0 * ls2**2)
        dX = -np.einsum("ab,abq->aq", W, diff) / ls2
        if symmetric:
            dX = dX + np.einsum("ab,abq->bq", W, diff) / ls2
        dparams = np.concatenate([[W.sum()], dls2 * 2.0 * ls2])
        return dX, dparams

    def psi(self, q, Z):
        _check_cols(Z, self.input_dim, "psi")
        ls2 = self.lengthscales**2
        mu, S = q.mu, q.s
        psi1 = hot.dispatch("psi1")(mu, S, Z, self.variance, ls2)
        psi2 = hot.dispatch("psi2")(mu, S, Z, self.variance, ls2)
        return PsiStats(mu.shape[0] * self.variance, psi1, psi2)

    def psi_vjp(self, q, Z, g0, G1, G2):
        ls2 = self.lengthscales**2
        mu, S = q.mu, q.s
        parts = [hot.dispatch("psi1_vjp")(mu, S, Z, self.variance, ls2, G1)] if G1 is not None else []
        if G2 is not None:
            parts.append(hot.dispatch("psi2_vjp")(mu, S, Z, self.variance, ls2, np.ascontiguousarray(G2)))
        dmu = np.zeros_like(mu)
        dS = np.zeros_like(S)
        dZ = np.zeros_like(Z)
        dls2 = np.zeros(self.input_dim)
        dlogvar = g0 * mu.shape[0] * self.variance
        for a, b, c, e, f in parts:
            dmu += a
            dS += b
            dZ += c
            dls2 += e
            dlogvar += f
        return PsiGrads(dmu, dS, dZ, np.concatenate([[dlogvar], dls2 * 2.0 * ls2]))


class Linear(Kernel):
    """ARD linear kernel ``sum_q var_q x_q y_q``."""

    family = "linear"

    def __init__(self, input_dim, variances=1.0):
        self.input_dim = int(input_dim)
        self.variances = np.broadcast_to(np.asarray(variances, dtype=float),
                                         (self.input_dim,)).copy()
        if np.any(self.variances < 0):
            raise ValueError("linear kernel variances must be non-negative")

    def get_params(self):
        return np.log(self.variances)

    def set_params(self, p):
        self.variances = np.exp(np.asarray(p, dtype=float))

    def gram(self, X1, X2=None):
        X2 = X1 if X2 is None else X2
        _check_cols(X1, self.input_dim, "gram")
        _check_cols(X2, self.input_dim, "gram")
        return (X1 * self.variances) @ X2.T

    def kdiag(self, X):
        return (X**2) @ self.variances

    def gram_vjp(self, X1, X2, G, symmetric=False):
        sv = self.variances
        dX = G @ X2 * sv
        if symmetric:
            dX = dX + G.T @ X1 * sv
        dvar = np.einsum("aq,ab,bq->q", X1, G, X2)
        return dX, dvar * sv

    def psi(self, q, Z):
        _check_cols(Z, self.input_dim, "psi")
        mu, S = q.mu, q.s
        sv = self.variances
        psi0 = float(((mu**2 + S) @ sv).sum())
        psi1 = (mu * sv) @ Z.T
        M = mu.T @ mu + np.diag(S.sum(axis=0))
        ZS = Z * sv
        return PsiStats(psi0, psi1, ZS @ M @ ZS.T)

    def psi_vjp(self, q, Z, g0, G1, G2):
        mu, S = q.mu, q.s
        sv = self.variances
        dmu = 2.0 * g0 * mu * sv
        dS = g0 * np.broadcast_to(sv, S.shape).copy()
        dsv = g0 * (mu**2 + S).sum(axis=0)
        dZ = np.zeros_like(Z)
        if G1 is not None:
            dmu += G1 @ Z * sv
            dZ += G1.T @ mu * sv
            dsv += np.einsum("iq,im,mq->q", mu, G1, Z)
        if G2 is not None:
            M = mu.T @ mu + np.diag(S.sum(axis=0))
            ZS = Z * sv
            Gs = G2 + G2.T
            dZ += Gs @ ZS @ M * sv
            P = Z.T @ G2 @ Z
            dsv += np.diag((M * sv) @ P.T + (P.T * sv) @ M)
            dM = sv[:, None] * P * sv[None, :]
            dmu += mu @ (dM + dM.T)
            dS += np.diag(dM)[None, :]
        return PsiGrads(dmu, dS, dZ, dsv * sv)


class Sum(Kernel):
    """``RBF + Linear`` on the same latent inputs."""

    family = "sum"

    def __init__(self, rbf, linear):
        if rbf.input_dim != linear.input_dim:
            raise ValueError("sum kernel components must share input_dim")
        self.rbf = rbf
        self.linear = linear
        self.input_dim = rbf.input_dim

    def copy(self):
        return Sum(self.rbf.copy(), self.linear.copy())

    def get_params(self):
        return np.concatenate([self.rbf.get_params(), self.linear.get_params()])

    def set_params(self, p):
        k = self.rbf.n_params
        self.rbf.set_params(p[:k])
        self.linear.set_params(p[k:])

    def gram(self, X1, X2=None):
        return self.rbf.gram(X1, X2) + self.linear.gram(X1, X2)

    def kdiag(self, X):
        return self.rbf.kdiag(X) + self.linear.kdiag(X)

    def gram_vjp(self, X1, X2, G, symmetric=False):
        a, pa = self.rbf.gram_vjp(X1, X2, G, symmetric)
        b, pb = self.linear.gram_vjp(X1, X2, G, symmetric)
        return a + b, np.concatenate([pa, pb])

    def _cross_parts(self, q, Z):
        ls2 = self.rbf.lengthscales**2
        mu, S = q.mu, q.s
        P1 = hot.dispatch("psi1")(mu, S, Z, self.rbf.variance, ls2)
        den = ls2 + S  # (n, d)
        # tilted mean of x_q under N(mu, s) times the RBF factor centred at z
        mt = (mu[:, :, None] * ls2[None, :, None] + Z.T[None, :, :] * S[:, :, None]) / den[:, :, None]
        return P1, mt, den, ls2

    def psi(self, q, Z):
        pr = self.rbf.psi(q, Z)
        pl = self.linear.psi(q, Z)
        P1, mt, _, _ = self._cross_parts(q, Z)
        Hsum = np.einsum("im,iqm->qm", P1, mt)
        X = (Z * self.linear.variances) @ Hsum
        return PsiStats(pr.psi0 + pl.psi0, pr.psi1 + pl.psi1, pr.psi2 + pl.psi2 + X + X.T)

    def psi_vjp(self, q, Z, g0, G1, G2):
        gr = self.rbf.psi_vjp(q, Z, g0, G1, G2)
        gl = self.linear.psi_vjp(q, Z, g0, G1, G2)
        dmu = gr.dmu + gl.dmu
        dS = gr.ds + gl.ds
        dZ = gr.dZ + gl.dZ
        drbf = gr.dparams.copy()
        dlin = gl.dparams.copy()
        if G2 is not None:
            sv = self.linear.variances
            mu, S = q.mu, q.s
            P1, mt, den, ls2 = self._cross_parts(q, Z)
            Hsum = np.einsum("im,iqm->qm", P1, mt)
            GX = G2 + G2.T
            dZ += GX @ Hsum.T * sv
            dlin += np.einsum("mq,mk,qk->q", Z, GX, Hsum) * sv
            Hbar = sv[:, None] * (Z.T @ GX)  # (d, m)
            G1eff = np.einsum("qm,iqm->im", Hbar, mt)
            g1 = self.rbf.psi_vjp(q, Z, 0.0, G1eff, None)
            dmu += g1.dmu
            dS += g1.ds
            dZ += g1.dZ
            drbf += g1.dparams
            coef = Hbar[None, :, :] * P1[:, None, :]  # (n, d, m)
            csum = coef.sum(axis=2)  # (n, d)
            cz = np.einsum("iqm,mq->iq", coef, Z)
            dmu += csum * ls2 / den
            dS += (cz - csum * mu) * ls2 / den**2
            dZ += np.einsum("iqm,iq->mq", coef, S / den)
            dls2 = ((csum * mu - cz) * S / den**2).sum(axis=0)
            drbf[1:] += dls2 * 2.0 * ls2
        return PsiGrads(dmu, dS, dZ, np.concatenate([drbf, dlin]))


class Exponential(Kernel):
    """``var * exp(-||x - y|| / l)``; the variance is fixed, only ``l`` trains."""

    family = "exponential"

    def __init__(self, input_dim=1, lengthscale=1.0, variance=1.0):
        self.input_dim = int(input_dim)
        self.lengthscale = float(lengthscale)
        self.variance = float(variance)
        if self.lengthscale <= 0 or self.variance <= 0:
            raise ValueError("exponential kernel hyperparameters must be positive")

    def get_params(self):
        return np.array([np.log(self.lengthscale)])

    def set_params(self, p):
        self.lengthscale = float(np.exp(p[0]))

    def gram(self, X1, X2=None):
        X2 = X1 if X2 is None else X2
        _check_cols(X1, self.input_dim, "gram")
        _check_cols(X2, self.input_dim, "gram")
        r = np.sqrt(np.maximum(_sqdist(X1, X2), 0.0))
        return self.variance * np.exp(-r / self.lengthscale)

    def kdiag(self, X):
        return np.full(X.shape[0], self.variance)

    def gram_vjp(self, X1, X2, G, symmetric=False):
        r = np.sqrt(np.maximum(_sqdist(X1, X2), 0.0))
        K = self.variance * np.exp(-r / self.lengthscale)
        # inputs are fixed grids; only the lengthscale gradient is provided
        return None, np.array([np.sum(G * K * r) / self.lengthscale])


def gram(k, X1, X2=None):
    return k.gram(np.atleast_2d(X1), None if X2 is None else np.atleast_2d(X2))


def psi_stats(k, q, Z):
    return k.psi(q, Z)


def psi_stats_rbf(k, q, Z):
    if not isinstance(k, RBF):
        raise TypeError("psi_stats_rbf needs an RBF kernel")
    return k.psi(q, Z)


def psi_stats_linear(k, q, Z):
    if not isinstance(k, Linear):
        raise TypeError("psi_stats_linear needs a Linear kernel")
    return k.psi(q, Z)


def psi_stats_sum(k, q, Z):
    if not isinstance(k, Sum):
        raise TypeError("psi_stats_sum needs a Sum kernel")
    return k.psi(q, Z)


def make_stochastic_kernel(name, input_dim, lengthscales=1.0, variance=1.0, linear_variance=0.1):
    """Factory for the latent-space kernels used by the pipelines."""
    if name == "rbf":
        return RBF(input_dim, variance, lengthscales)
    if name == "linear":
        return Linear(input_dim, linear_variance)
    if name == "sum":
        return Sum(RBF(input_dim, variance, lengthscales), Linear(input_dim, linear_variance))
    raise ValueError(f"unknown stochastic kernel {name!r}; expected rbf, linear or sum")


def kernel_to_dict(k):
    if isinstance(k, Sum):
        return {"family": "sum", "rbf": kernel_to_dict(k.rbf), "linear": kernel_to_dict(k.linear)}
    if isinstance(k, RBF):
        return {"family": "rbf_ard", "input_dim": k.input_dim, "variance": k.variance,
                "lengthscales": k.lengthscales.tolist()}
    if isinstance(k, Linear):
        return {"family": "linear", "input_dim": k.input_dim, "variances": k.variances.tolist()}
    if isinstance(k, Exponential):
        return {"family": "exponential", "input_dim": k.input_dim,
                "lengthscale": k.lengthscale, "variance": k.variance}
    raise TypeError(type(k).__name__)


def kernel_from_dict(d):
    fam = d["family"]
    if fam == "sum":
        return Sum(kernel_from_dict(d["rbf"]), kernel_from_dict(d["linear"]))
    if fam == "rbf_ard":
        return RBF(d["input_dim"], d["variance"], d["lengthscales"])
    if fam == "linear":
        return Linear(d["input_dim"], d["variances"])
    if fam == "exponential":
        return Exponential(d["input_dim"], d["lengthscale"], d["variance"])
    raise ValueError(f"unknown kernel family {fam!r}")
