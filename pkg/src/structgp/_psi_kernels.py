"""Hot loops for RBF-ARD kernel expectations and their reverse-mode sweeps.

Every routine exists twice: a numba ``@njit`` loop and a vectorised numpy
version.  :func:`dispatch` picks one according to ``structgp._accel``.
Arguments: ``mu, S`` are ``(n, d)``, ``Z`` is ``(m, d)``, ``var`` the signal
variance and ``ls2`` the squared lengthscales ``(d,)``.
"""
import numpy as np

from . import _accel
from ._accel import njit


# ---------------------------------------------------------------- numpy path


def psi1_np(mu, S, Z, var, ls2):
    denom = ls2 + S  # (n, d)
    diff = mu[:, None, :] - Z[None, :, :]  # (n, m, d)
    log_pref = -0.5 * np.log(denom / ls2).sum(axis=1)  # (n,)
    expo = -0.5 * (diff**2 / denom[:, None, :]).sum(axis=2)
    return var * np.exp(log_pref[:, None] + expo)


def psi2_np(mu, S, Z, var, ls2):
    m = Z.shape[0]
    dz2 = ((Z[:, None, :] - Z[None, :, :]) ** 2 / (4.0 * ls2)).sum(axis=2)
    zbar = 0.5 * (Z[:, None, :] + Z[None, :, :])  # (m, m, d)
    out = np.zeros((m, m))
    for i in range(mu.shape[0]):
        denom = ls2 + 2.0 * S[i]
        log_pref = -0.5 * np.log(denom / ls2).sum()
        expo = ((mu[i] - zbar) ** 2 / denom).sum(axis=2)
        out += np.exp(log_pref - dz2 - expo)
    return var**2 * out


def psi1_vjp_np(mu, S, Z, var, ls2, G1):
    """Returns ``(dmu, dS, dZ, dls2, dlogvar)`` for adjoint ``G1`` on Ψ1."""
    P1 = psi1_np(mu, S, Z, var, ls2)
    W = G1 * P1  # (n, m)
    denom = ls2 + S  # (n, d)
    diff = mu[:, None, :] - Z[None, :, :]  # (n, m, d)
    r = diff / denom[:, None, :]
    dmu = -np.einsum("nm,nmd->nd", W, r)
    dZ = np.einsum("nm,nmd->md", W, r)
    wsum = W.sum(axis=1)  # (n,)
    r2 = np.einsum("nm,nmd->nd", W, diff**2) / (2.0 * denom**2)
    dS = -0.5 * wsum[:, None] / denom + r2
    dls2 = (-0.5 * wsum[:, None] * (1.0 / denom - 1.0 / ls2) + r2).sum(axis=0)
    return dmu, dS, dZ, dls2, W.sum()


def psi2_vjp_np(mu, S, Z, var, ls2, G2):
    n, d = mu.shape
    m = Z.shape[0]
    dZdiff = Z[:, None, :] - Z[None, :, :]  # (m, m, d)
    dz2 = (dZdiff**2 / (4.0 * ls2)).sum(axis=2)
    zbar = 0.5 * (Z[:, None, :] + Z[None, :, :])
    dmu = np.zeros((n, d))
    dS = np.zeros((n, d))
    dZ = np.zeros((m, d))
    dls2 = np.zeros(d)
    dlogvar = 0.0
    var2 = var**2
    for i in range(n):
        denom = ls2 + 2.0 * S[i]
        log_pref = -0.5 * np.log(denom / ls2).sum()
        c = mu[i] - zbar  # (m, m, d)
        expo = (c**2 / denom).sum(axis=2)
        W = G2 * (var2 * np.exp(log_pref - dz2 - expo))  # (m, m)
        wsum = W.sum()
        dlogvar += 2.0 * wsum
        Wc = np.einsum("ab,abd->d", W, c)
        Wc2 = np.einsum("ab,abd->d", W, c**2)
        dmu[i] = -2.0 * Wc / denom
        dS[i] = -wsum / denom + 2.0 * Wc2 / denom**2
        t = np.einsum("ab,abd->abd", W, c) / denom  # d/dzbar * 1/2 contributions
        u = np.einsum("ab,abd->abd", W, dZdiff) / (2.0 * ls2)
        dZ += t.sum(axis=1) + t.sum(axis=0) - u.sum(axis=1) + u.sum(axis=0)
        dls2 += (
            -0.5 * wsum * (1.0 / denom - 1.0 / ls2)
            + np.einsum("ab,abd->d", W, dZdiff**2) / (4.0 * ls2**2)
            + Wc2 / denom**2
        )
    return dmu, dS, dZ, dls2, dlogvar


# ---------------------------------------------------------------- numba path


@njit
def psi1_nb(mu, S, Z, var, ls2):
    n, d = mu.shape
    m = Z.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        lp = 0.0
        for q in range(d):
            lp -= 0.5 * np.log((ls2[q] + S[i, q]) / ls2[q])
        for a in range(m):
            e = lp
            for q in range(d):
                t = mu[i, q] - Z[a, q]
                e -= 0.5 * t * t / (ls2[q] + S[i, q])
            out[i, a] = var * np.exp(e)
    return out


@njit
def psi2_nb(mu, S, Z, var, ls2):
    n, d = mu.shape
    m = Z.shape[0]
    out = np.zeros((m, m))
    dz2 = np.zeros((m, m))
    for a in range(m):
        for b in range(a + 1):
            acc = 0.0
            for q in range(d):
                t = Z[a, q] - Z[b, q]
                acc += t * t / (4.0 * ls2[q])
            dz2[a, b] = acc
    for i in range(n):
        lp = 0.0
        for q in range(d):
            lp -= 0.5 * np.log((ls2[q] + 2.0 * S[i, q]) / ls2[q])
        for a in range(m):
            for b in range(a + 1):
                e = lp - dz2[a, b]
                for q in range(d):
                    c = mu[i, q] - 0.5 * (Z[a, q] + Z[b, q])
                    e -= c * c / (ls2[q] + 2.0 * S[i, q])
                out[a, b] += np.exp(e)
    for a in range(m):
        for b in range(a):
            out[b, a] = out[a, b]
    return var * var * out


@njit
def psi1_vjp_nb(mu, S, Z, var, ls2, G1):
    n, d = mu.shape
    m = Z.shape[0]
    P1 = psi1_nb(mu, S, Z, var, ls2)
    dmu = np.zeros((n, d))
    dS = np.zeros((n, d))
    dZ = np.zeros((m, d))
    dls2 = np.zeros(d)
    dlogvar = 0.0
    for i in range(n):
        for a in range(m):
            w = G1[i, a] * P1[i, a]
            dlogvar += w
            for q in range(d):
                den = ls2[q] + S[i, q]
                t = mu[i, q] - Z[a, q]
                r = t / den
                dmu[i, q] -= w * r
                dZ[a, q] += w * r
                r2 = w * t * t / (2.0 * den * den)
                dS[i, q] += -0.5 * w / den + r2
                dls2[q] += -0.5 * w * (1.0 / den - 1.0 / ls2[q]) + r2
    return dmu, dS, dZ, dls2, dlogvar


@njit
def psi2_vjp_nb(mu, S, Z, var, ls2, G2):
    n, d = mu.shape
    m = Z.shape[0]
    dmu = np.zeros((n, d))
    dS = np.zeros((n, d))
    dZ = np.zeros((m, d))
    dls2 = np.zeros(d)
    dlogvar = 0.0
    var2 = var * var
    dz2 = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            acc = 0.0
            for q in range(d):
                t = Z[a, q] - Z[b, q]
                acc += t * t / (4.0 * ls2[q])
            dz2[a, b] = acc
    for i in range(n):
        lp = 0.0
        for q in range(d):
            lp -= 0.5 * np.log((ls2[q] + 2.0 * S[i, q]) / ls2[q])
        for a in range(m):
            for b in range(m):
                e = lp - dz2[a, b]
                for q in range(d):
                    c = mu[i, q] - 0.5 * (Z[a, q] + Z[b, q])
                    e -= c * c / (ls2[q] + 2.0 * S[i, q])
                w = G2[a, b] * var2 * np.exp(e)
                dlogvar += 2.0 * w
                for q in range(d):
                    den = ls2[q] + 2.0 * S[i, q]
                    c = mu[i, q] - 0.5 * (Z[a, q] + Z[b, q])
                    dzd = Z[a, q] - Z[b, q]
                    dmu[i, q] -= 2.0 * w * c / den
                    dS[i, q] += -w / den + 2.0 * w * c * c / (den * den)
                    tz = w * c / den
                    uz = w * dzd / (2.0 * ls2[q])
                    dZ[a, q] += tz - uz
                    dZ[b, q] += tz + uz
                    dls2[q] += (
                        -0.5 * w * (1.0 / den - 1.0 / ls2[q])
                        + w * dzd * dzd / (4.0 * ls2[q] * ls2[q])
                        + w * c * c / (den * den)
                    )
    return dmu, dS, dZ, dls2, dlogvar


_NUMPY = {"psi1": psi1_np, "psi2": psi2_np, "psi1_vjp": psi1_vjp_np, "psi2_vjp": psi2_vjp_np}
_NUMBA = {"psi1": psi1_nb, "psi2": psi2_nb, "psi1_vjp": psi1_vjp_nb, "psi2_vjp": psi2_vjp_nb}


def dispatch(name):
    return (_NUMBA if _accel.numba_enabled() else _NUMPY)[name]
