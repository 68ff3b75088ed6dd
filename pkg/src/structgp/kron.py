"""Dense symmetric linear algebra and Kronecker-product utilities.

Kronecker products use row-major ordering throughout: for factors
``A_0, ..., A_{F-1}`` with sizes ``n_0, ..., n_{F-1}`` the flat index of the
multi-index ``(i_0, ..., i_{F-1})`` is ``((i_0 * n_1) + i_1) * n_2 + ...``,
which is what ``numpy.kron`` and ``ndarray.reshape`` produce.  The stochastic
factor always comes first, followed by the spatial factors.
"""
from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy import linalg

EIG_FLOOR = 1e-12


class KronShapeError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KronMatrix:
    """Lazy Kronecker product of square factors."""

    factors: tuple

    def __post_init__(self):
        facs = tuple(np.asarray(f, dtype=float) for f in self.factors)
        if len(facs) == 0:
            raise KronShapeError("KronMatrix needs at least one factor")
        for f in facs:
            if f.ndim != 2 or f.shape[0] != f.shape[1]:
                raise KronShapeError(f"factor of shape {f.shape} is not square")
        object.__setattr__(self, "factors", facs)

    @property
    def sizes(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def size(self):
        return int(np.prod(self.sizes))

    def dense(self):
        return reduce(np.kron, self.factors)

    def __matmul__(self, other):
        other = np.asarray(other, dtype=float)
        if other.ndim == 1:
            return kron_matvec(self, other)
        return kron_matmat(self, other)


@dataclass(frozen=True)
class EigenPair:
    Q: np.ndarray
    lam: np.ndarray

    def reconstruct(self):
        return (self.Q * self.lam) @ self.Q.T


@dataclass(frozen=True)
class CholFactor:
    L: np.ndarray
    jitter: float = 0.0


def kron_apply(factors, X):
    """Apply ``kron(*factors)`` to the rows of ``X`` without forming it.

    Factors may be rectangular; ``X`` is a vector or a matrix whose row count
    equals the product of the factors' column counts.
    """
    factors = [np.asarray(f, dtype=float) for f in factors]
    X = np.asarray(X, dtype=float)
    vec = X.ndim == 1
    if vec:
        X = X[:, None]
    cols = [f.shape[1] for f in factors]
    if X.shape[0] != int(np.prod(cols)):
        raise KronShapeError(
            f"operand has {X.shape[0]} rows, Kronecker product expects {int(np.prod(cols))}"
        )
    T = X.reshape(*cols, X.shape[1])
    for axis, f in enumerate(factors):
        T = np.moveaxis(np.tensordot(f, T, axes=([1], [axis])), 0, axis)
    out = T.reshape(-1, X.shape[1])
    return out[:, 0] if vec else out


def kron_matvec(K, v):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise KronShapeError("kron_matvec expects a vector")
    if v.shape[0] != K.size:
        raise KronShapeError(f"vector of length {v.shape[0]} vs Kronecker size {K.size}")
    return kron_apply(K.factors, v)


def kron_matmat(K, M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise KronShapeError("kron_matmat expects a matrix")
    if M.shape[0] != K.size:
        raise KronShapeError(f"matrix with {M.shape[0]} rows vs Kronecker size {K.size}")
    return kron_apply(K.factors, M)


def kron_vec(vectors):
    """Kronecker product of 1-D arrays (e.g. composed eigenvalues)."""
    return reduce(np.kron, [np.asarray(v, dtype=float) for v in vectors])


def sym_eig(A):
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("sym_eig: matrix has non-finite entries")
    lam, Q = np.linalg.eigh(0.5 * (A + A.T))
    return EigenPair(Q=Q, lam=lam)


def kron_eig(K):
    """Per-factor eigendecompositions composed in Kronecker order."""
    pairs = [sym_eig(f) for f in K.factors]
    return KronMatrix(tuple(p.Q for p in pairs)), kron_vec([p.lam for p in pairs])


def clamp_eigs(lam, floor=EIG_FLOOR):
    lam = np.asarray(lam, dtype=float)
    return np.maximum(lam, floor * max(lam.max(), 0.0))


def chol(A, max_tries=5, name="matrix"):
    """Cholesky factor with escalating diagonal jitter on failure.

    Jitter starts at ``1e-10 * mean(diag(A))`` and grows tenfold per retry.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefiniteError(f"{name} has non-finite entries")
    try:
        return CholFactor(np.linalg.cholesky(A), 0.0)
    except np.linalg.LinAlgError:
        pass
    base = 1e-10 * max(np.mean(np.diag(A)), np.finfo(float).tiny)
    eye = np.eye(A.shape[0])
    for k in range(max_tries):
        jitter = base * 10.0**k
        try:
            return CholFactor(np.linalg.cholesky(A + jitter * eye), jitter)
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefiniteError(
        f"{name} is not positive definite even with jitter {base * 10.0 ** (max_tries - 1):.3g}"
    )


def tri_solve(L, B, trans=False, lower=True):
    """Solve ``L x = B`` (or ``L^T x = B`` with ``trans``)."""
    L = L.L if isinstance(L, CholFactor) else np.asarray(L, dtype=float)
    if np.any(np.diag(L) == 0.0):
        raise np.linalg.LinAlgError("triangular factor has a zero on its diagonal")
    return linalg.solve_triangular(L, B, trans=1 if trans else 0, lower=lower)


def chol_solve(L, B):
    """Solve ``L L^T x = B``."""
    return tri_solve(L, tri_solve(L, B), trans=True)


# -- contractions used when back-propagating through Kronecker products --------


def kron_bilinear_grads(factors, u, v):
    """Gradients of ``u^T kron(*factors) v`` with respect to every factor.

    ``u`` and ``v`` may be matrices, in which case the result is the gradient
    of ``sum_j u_j^T K v_j``.
    """
    factors = [np.asarray(f, dtype=float) for f in factors]
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.ndim == 1:
        u, v = u[:, None], v[:, None]
    rows = [f.shape[0] for f in factors]
    cols = [f.shape[1] for f in factors]
    U = u.reshape(*rows, u.shape[1])
    V = v.reshape(*cols, v.shape[1])
    grads = []
    F = len(factors)
    for k in range(F):
        T = V
        for axis, f in enumerate(factors):
            if axis == k:
                continue
            T = np.moveaxis(np.tensordot(f, T, axes=([1], [axis])), 0, axis)
        # T has rows[axis] along every axis != k and cols[k] along k.
        Um = np.moveaxis(U, k, 0).reshape(rows[k], -1)
        Tm = np.moveaxis(T, k, 0).reshape(cols[k], -1)
        grads.append(Um @ Tm.T)
    return grads


def kron_eigbasis_trace_grads(W, g, X):
    """Gradients of ``tr(W diag(g) W^T kron(*X))`` with respect to each ``X_k``.

    ``W`` and ``X`` are lists of per-factor matrices; ``g`` is a vector in
    Kronecker order.  Each gradient is ``W_k diag(h_k) W_k^T`` with ``h_k`` the
    contraction of ``g`` against the other factors' quadratic forms.
    """
    p = [np.einsum("ij,ik,kj->j", w, x, w) for w, x in zip(W, X)]
    sizes = [w.shape[1] for w in W]
    G = np.asarray(g, dtype=float).reshape(sizes)
    grads = []
    for k in range(len(W)):
        T = G
        for axis in reversed(range(len(W))):
            if axis == k:
                continue
            T = np.tensordot(T, p[axis], axes=([axis], [0]))
        grads.append((W[k] * T) @ W[k].T)
    return grads
