"""Predictions from a trained structured GP-LVM and inference of test latents.

All routines work from a :class:`Posterior`, a read-only bundle of the
trained model and the factorisations of its bound.  Spatial test points are
given per factor (``x_s_star``), so any Cartesian grid works, including
subsets or refinements of the training grid.
"""
from dataclasses import dataclass

import numpy as np

from .kernels import VariationalLatentPosterior
from .kron import kron_apply, kron_vec, tri_solve
from .optim import OptimSettings, maximize
from .sgplvm import build_cache, latent_prior_kl

LOG2PI = np.log(2.0 * np.pi)
LOG_BETA_BOUNDS = (np.log(1e-6), np.log(1e12))
LOG_S_BOUNDS = (np.log(1e-10), np.log(1e3))


@dataclass
class TestLatentPosterior:
    __test__ = False

    mu_star: np.ndarray
    s_star: np.ndarray
    beta_star: float

    def __post_init__(self):
        self.mu_star = np.atleast_2d(np.asarray(self.mu_star, dtype=float))
        self.s_star = np.atleast_2d(np.asarray(self.s_star, dtype=float))
        if np.any(self.s_star <= 0) or not self.beta_star > 0:
            raise ValueError("s_star and beta_star must be positive")

    @property
    def q(self):
        return VariationalLatentPosterior(self.mu_star, self.s_star)


@dataclass
class PredictiveMoments:
    mean: np.ndarray
    variance: np.ndarray = None
    covariance: np.ndarray = None


class Posterior:
    """Cached quantities of a trained model needed at prediction time."""

    def __init__(self, model):
        if model is None:
            raise ValueError("no trained model")
        self.model = model
        self.cache = c = build_cache(model)
        self.W = c.W
        self.alpha = c.alpha()
        self.kuu_inv = [tri_solve(L, tri_solve(L, np.eye(len(L))), trans=True) for L in c.L]

    def spatial_cross(self, x_s_star):
        m = self.model
        if len(x_s_star) != len(m.x_s):
            raise ValueError(f"expected {len(m.x_s)} spatial factors, got {len(x_s_star)}")
        xs = [np.asarray(x, dtype=float).reshape(len(x), -1) for x in x_s_star]
        return xs, [k.gram(x, xt) for k, x, xt in zip(m.k_s, xs, m.x_s)]


def _as_posterior(p):
    return p if isinstance(p, Posterior) else Posterior(p)


def predict_given_latent(post, x_xi_star, x_s_star, want=("mean", "marginal_variance"), include_noise=True):
    """Gaussian predictive at fixed latent inputs; rows ordered (latent, spatial...)."""
    post = _as_posterior(post)
    m = post.model
    want = set(want)
    x_xi_star = np.atleast_2d(np.asarray(x_xi_star, dtype=float))
    if x_xi_star.shape[1] != m.d_xi:
        raise ValueError(f"latent test inputs need {m.d_xi} columns")
    xs, Ks = post.spatial_cross(x_s_star)
    Ku = [m.k_xi.gram(x_xi_star, m.z_xi)] + Ks
    out = PredictiveMoments(mean=kron_apply(Ku, post.alpha))
    shrink = 1.0 - 1.0 / (m.beta * post.cache.d)
    noise = 1.0 / m.beta if include_noise else 0.0
    if "marginal_variance" in want:
        G = [k @ w for k, w in zip(Ku, post.W)]
        prior = kron_vec([m.k_xi.kdiag(x_xi_star)] + [k.kdiag(x) for k, x in zip(m.k_s, xs)])
        var = prior - kron_apply([g**2 for g in G], shrink) + noise
        out.variance = np.repeat(var[:, None], m.d_y, axis=1)
    if "full_covariance" in want:
        if x_xi_star.shape[0] != 1:
            raise ValueError("full covariance needs exactly one latent test point")
        out.covariance = _covariance(post, x_xi_star, xs, Ku, shrink) + noise * np.eye(len(out.mean))
    return out


def _covariance(post, x_xi_star, xs, Ku, shrink):
    """Blockwise accumulation over the stochastic eigen-index."""
    m = post.model
    g_xi = (Ku[0] @ post.W[0])[0]
    Gs = [k @ w for k, w in zip(Ku[1:], post.W[1:])]
    G_s = Gs[0]
    for g in Gs[1:]:
        G_s = np.kron(G_s, g)
    blocks = np.sqrt(shrink).reshape(len(g_xi), -1)
    Sigma = np.zeros((G_s.shape[0], G_s.shape[0]))
    for i in range(len(g_xi)):
        H = G_s * blocks[i]
        Sigma -= g_xi[i] ** 2 * (H @ H.T)
    Kss = m.k_s[0].gram(xs[0])
    for k, x in zip(m.k_s[1:], xs[1:]):
        Kss = np.kron(Kss, k.gram(x))
    return Sigma + m.k_xi.kdiag(x_xi_star)[0] * Kss


def predict_marginalized(post, q_star, x_s_star, n_mog=100, rng=None, include_noise=True):
    """Analytic mean under q(x*) and mixture-of-Gaussians variance from ``n_mog`` samples."""
    if n_mog < 1:
        raise ValueError("n_mog must be at least 1")
    post = _as_posterior(post)
    m = post.model
    q = q_star.q if isinstance(q_star, TestLatentPosterior) else q_star
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng or 0)
    _, Ks = post.spatial_cross(x_s_star)
    psi1 = m.k_xi.psi(q, m.z_xi).psi1
    mean = kron_apply([psi1] + Ks, post.alpha)
    draws = q.mu + np.sqrt(q.s) * rng.standard_normal((n_mog, q.mu.shape[1]))
    cond = predict_given_latent(post, draws, x_s_star, include_noise=include_noise)
    n_star = mean.shape[0]
    mu_i = cond.mean.reshape(n_mog, n_star, -1)
    v_i = cond.variance.reshape(n_mog, n_star, -1)
    var = np.mean((mu_i - mean) ** 2 + v_i, axis=0)
    return PredictiveMoments(mean=mean, variance=var)


# ------------------------------------------------------------------ test term


class TestTerm:
    """``F*`` for one set of spatial test points, with gradients for latent inference."""

    __test__ = False

    def __init__(self, post, y_star, x_s_star, mask=None):
        post = _as_posterior(post)
        self.post = post
        m = post.model
        y_star = np.asarray(y_star, dtype=float)
        y_star = y_star[:, None] if y_star.ndim == 1 else y_star
        mask = np.ones(m.d_y, bool) if mask is None else np.asarray(mask, bool)
        if mask.shape != (m.d_y,):
            raise ValueError(f"mask needs {m.d_y} entries")
        if not mask.any():
            raise ValueError("at least one output dimension must be observed")
        xs, Ks = post.spatial_cross(x_s_star)
        if y_star.shape != (int(np.prod([len(x) for x in xs])), m.d_y):
            raise ValueError(f"y_star has shape {y_star.shape}; expected ({int(np.prod([len(x) for x in xs]))}, {m.d_y})")
        self.mask = mask
        self.y = y_star[:, mask]
        self.a = post.alpha[:, mask]
        self.Ks = Ks
        self.A = [k.T @ k for k in Ks]
        self.n_star = y_star.shape[0]
        self.n_obs = int(mask.sum())
        self.kdiag_s = float(np.prod([k.kdiag(x).sum() for k, x in zip(m.k_s, xs)]))
        self.yy = float(np.sum(self.y**2))
        # everything below is independent of q(x*), so each evaluation of F*
        # only touches m_xi x m_xi matrices
        mx, k = m.m_xi, self.n_obs
        eye = np.eye(mx)
        KA = kron_apply([eye] + Ks, self.a).reshape(mx, self.n_star, k)
        self.c = np.einsum("isk,sk->ik", KA, self.y)
        AA = kron_apply([eye] + self.A, self.a).reshape(mx, -1, k)
        self.D = np.einsum("isk,jsk->ijk", self.a.reshape(mx, -1, k), AA)
        wAw = kron_vec([np.einsum("ij,ik,kj->j", w, a, w) for w, a in zip(post.W[1:], self.A)])
        r = (1.0 / post.cache.d).reshape(mx, -1) @ wAw
        W0 = post.W[0]
        self.R = (W0 * r) @ W0.T
        self.tr_kinv_A = float(np.prod([np.sum(ki * a) for ki, a in zip(post.kuu_inv[1:], self.A)]))

    def _parts(self, q):
        m = self.post.model
        psi = m.k_xi.psi(q, m.z_xi)
        p1 = psi.psi1[0]
        fit = p1 @ self.c
        quad = np.einsum("ij,ijk->k", psi.psi2, self.D)
        tr_psi = float(np.sum(psi.psi2 * self.R))
        tr_kinv = float(np.sum(self.post.kuu_inv[0] * psi.psi2)) * self.tr_kinv_A
        return psi, fit, quad, tr_psi, tr_kinv

    def per_dim(self, q, beta_star):
        """``F*_j`` for each observed column."""
        m = self.post.model
        psi, fit, quad, tr_psi, tr_kinv = self._parts(q)
        psi0 = psi.psi0 * self.kdiag_s
        inner = (np.sum(self.y**2, axis=0) - 2 * fit + quad + tr_psi / m.beta + psi0 - tr_kinv)
        return -0.5 * self.n_star * (LOG2PI - np.log(beta_star)) - 0.5 * beta_star * inner

    def value(self, q, beta_star):
        """``L* = Σ_j F*_j - KL(q* || prior)``."""
        return float(np.sum(self.per_dim(q, beta_star)) - latent_prior_kl(q))

    def value_and_grad(self, q, beta_star):
        """Value and gradient w.r.t. ``(mu*, log s*, log β*)``."""
        post = self.post
        m = post.model
        b = m.beta
        bs = beta_star
        k = self.n_obs
        psi, fit, quad, tr_psi, tr_kinv = self._parts(q)
        psi0 = psi.psi0 * self.kdiag_s
        inner = self.yy - 2 * np.sum(fit) + np.sum(quad) + k * (tr_psi / b + psi0 - tr_kinv)
        val = -0.5 * k * self.n_star * (LOG2PI - np.log(bs)) - 0.5 * bs * inner - latent_prior_kl(q)
        g0 = -0.5 * bs * k * self.kdiag_s
        G1 = bs * self.c.sum(axis=1)[None, :]
        G2 = -0.5 * bs * self.D.sum(axis=2) - 0.5 * bs * k / b * self.R
        G2 = G2 + 0.5 * bs * k * self.tr_kinv_A * post.kuu_inv[0]
        pg = m.k_xi.psi_vjp(q, m.z_xi, g0, G1, G2)
        dmu = pg.dmu - q.mu
        ds = pg.ds - 0.5 * (1.0 - 1.0 / q.s)
        dlogb = bs * (0.5 * k * self.n_star / bs - 0.5 * inner)
        return val, np.concatenate([dmu.ravel(), (ds * q.s).ravel(), [dlogb]])


def test_term(post, q_star, y_star, x_s_star, mask=None):
    """Returns ``(L*, F*_j for the observed columns)``."""
    tt = TestTerm(post, y_star, x_s_star, mask)
    Fj = tt.per_dim(q_star.q, q_star.beta_star)
    return float(np.sum(Fj) - latent_prior_kl(q_star.q)), Fj


test_term.__test__ = False


@dataclass
class InferenceResult:
    posterior: TestLatentPosterior
    objective: float
    initial_objective: float
    restarts: list


def infer_latent(post, y_star, x_s_star, mask=None, optimize_beta_star=False, beta_star=None,
                 n_restarts=5, rng=None, settings=None, s_init=0.5):
    """Maximise ``L*`` over ``q(x*)`` (and ``log β*`` when requested) with restarts.

    Restart 0 starts at the training latent whose prediction best matches the
    observed columns; the others start at draws from the prior.  The trained
    model is never modified.
    """
    post = _as_posterior(post)
    m = post.model
    tt = TestTerm(post, y_star, x_s_star, mask)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng or 0)
    settings = settings or OptimSettings(max_iter=500)
    b0 = float(beta_star if beta_star is not None else m.beta)
    d = m.d_xi

    pred = predict_given_latent(post, m.q.mu, x_s_star, want=("mean",)).mean
    pred = pred.reshape(m.n_xi, tt.n_star, m.d_y)[:, :, tt.mask]
    nearest = int(np.argmin(np.sum((pred - tt.y) ** 2, axis=(1, 2))))
    starts = [m.q.mu[nearest]] + [rng.standard_normal(d) for _ in range(max(n_restarts - 1, 0))]

    def unpack(x):
        q = VariationalLatentPosterior(x[:d][None], np.exp(x[d:2 * d])[None])
        return q, (float(np.exp(x[-1])) if optimize_beta_star else b0)

    def fun(x):
        q, bs = unpack(x)
        v, g = tt.value_and_grad(q, bs)
        return v, (g if optimize_beta_star else g[:-1])

    bounds = [(None, None)] * d + [LOG_S_BOUNDS] * d + ([LOG_BETA_BOUNDS] if optimize_beta_star else [])
    best, runs, init_best = None, [], -np.inf
    for x0 in starts:
        x0 = np.concatenate([x0, np.full(d, np.log(s_init))] + ([[np.log(b0)]] if optimize_beta_star else []))
        try:
            v0 = fun(x0)[0]
            res = maximize(fun, x0, settings, bounds=bounds)
        except (FloatingPointError, np.linalg.LinAlgError):
            continue
        runs.append({"start": x0.tolist(), "objective": res.value, "n_iter": res.n_iter})
        init_best = max(init_best, v0)
        if best is None or res.value > best.value:
            best = res
    if best is None:
        raise FloatingPointError("objective was not finite at any restart")
    q, bs = unpack(best.x)
    return InferenceResult(TestLatentPosterior(q.mu, q.s, bs), best.value, init_best, runs)
