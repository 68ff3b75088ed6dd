"""Forward and inverse surrogates built from structured GP-LVMs.

Three variants share one interface (``forward`` maps an input field to a
predictive distribution over the output field, ``inverse`` maps noisy partial
output observations to a distribution over the input field):

* :class:`TwoModelSurrogate` trains an input model on the input fields, copies
  its latent posterior into an output model and trains the rest of the output
  model with the latents frozen;
* :class:`JointSurrogate` trains one model on the two fields side by side;
* :class:`PcaSurrogate` replaces the input model by linear PCA.

Spatial grids are passed around as lists of 1-D coordinate factors.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from .kernels import Exponential, VariationalLatentPosterior, make_stochastic_kernel
from .optim import OptimSettings
from .predictive import Posterior, PredictiveMoments, infer_latent, predict_marginalized
from .sgplvm import ARD_INIT, SgplvmModel, init_sgplvm, sgplvm_train

LOG2PI = np.log(2.0 * np.pi)
PCA_LATENT_VARIANCE = 1e-6


class PipelineError(ValueError):
    pass


@dataclass
class SurrogateSettings:
    kernel: str = "sum"
    output_kernel: str = "rbf"
    d_xi: int = None
    m_xi: int = None
    optim: OptimSettings = field(default_factory=lambda: OptimSettings(max_iter=1000))
    infer_optim: OptimSettings = field(default_factory=lambda: OptimSettings(max_iter=300, tol=1e-3))
    n_mog: int = 100
    n_restarts: int = 5
    spatial_lengthscale: float = 0.3
    seed: int = 0

    def dims(self, n_xi):
        d = self.d_xi or max(1, min(n_xi // 2, 128))
        m = self.m_xi or max(1, min(n_xi // 2, 128))
        return d, m


def _cols(factors):
    return [np.asarray(f, dtype=float).reshape(-1, 1) for f in factors]


def _same_grid(a, b):
    return len(a) == len(b) and all(len(x) == len(y) and np.allclose(x, y, rtol=0, atol=1e-12)
                                    for x, y in zip(a, b))


def _grid_size(factors):
    return int(np.prod([len(f) for f in factors]))


@dataclass
class Prediction:
    moments: PredictiveMoments
    latent: object = None
    beta_star: float = None

    @property
    def mean(self):
        return self.moments.mean[:, 0]

    @property
    def variance(self):
        return self.moments.variance[:, 0]


def _transfer_and_predict(src_post, y_star, x_star, dst_post, x_out, mask, optimize_beta, beta_star,
                          st, rng, col=0):
    res = infer_latent(src_post, y_star, x_star, mask=mask, optimize_beta_star=optimize_beta,
                       beta_star=beta_star, n_restarts=st.n_restarts, rng=rng, settings=st.infer_optim)
    q = res.posterior.q
    mom = predict_marginalized(dst_post, q, x_out, n_mog=st.n_mog, rng=rng)
    mom = PredictiveMoments(mom.mean[:, [col]], mom.variance[:, [col]])
    return Prediction(mom, res, res.posterior.beta_star)


def _case_rng(seed, case):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7919, int(case)]))


# ------------------------------------------------------------------ two-model


@dataclass
class TwoModelSurrogate:
    input_model: SgplvmModel
    output_model: SgplvmModel
    solved: np.ndarray
    settings: SurrogateSettings = field(default_factory=SurrogateSettings)
    factors_in: list = None
    factors_out: list = None

    def __post_init__(self):
        self._posts = None

    def posteriors(self):
        if self._posts is None:
            self._posts = (Posterior(self.input_model), Posterior(self.output_model))
        return self._posts

    def forward(self, input_field, factors_in=None, factors_out=None, rng=None):
        pin, pout = self.posteriors()
        y = np.asarray(input_field, dtype=float).reshape(-1, 1)
        return _transfer_and_predict(pin, y, _cols(factors_in or self.factors_in), pout,
                                     _cols(factors_out or self.factors_out), None, False,
                                     self.input_model.beta, self.settings, rng)

    def inverse(self, obs_values, obs_factors, factors_in=None, rng=None):
        pin, pout = self.posteriors()
        y = np.asarray(obs_values, dtype=float).reshape(-1, 1)
        return _transfer_and_predict(pout, y, _cols(obs_factors), pin, _cols(factors_in or self.factors_in),
                                     None, True, self.output_model.beta, self.settings, rng)


def _output_lengthscales(q):
    """ARD lengthscales from the spread of the shared latent means.

    Dimensions the input model switched off have (near) constant means and get
    long lengthscales; the rest start on the scale of the latent cloud.
    """
    v = np.maximum(q.mu.var(axis=0), 1e-12)
    return ARD_INIT(len(v), v / v.sum()) * np.sqrt(v.max())


def train_two_model(data_in, data_out, settings=None, solved=None, callback=None):
    """Input model on all input fields, output model on the solved subset with shared latents.

    ``solved`` lists the input rows that have solutions, in the row order of
    ``data_out``; by default every input was solved.
    """
    st = settings or SurrogateSettings()
    n_in = data_in.n_xi
    solved = np.arange(n_in) if solved is None else np.asarray(solved, dtype=int)
    if solved.size == 0:
        raise PipelineError("no solved realisations to train the output model on")
    if solved.min() < 0 or solved.max() >= n_in or len(np.unique(solved)) != len(solved):
        raise PipelineError("solved realisations must be distinct input rows")
    if data_out.n_xi != len(solved):
        raise PipelineError(f"{data_out.n_xi} output fields for {len(solved)} solved realisations")
    rng = np.random.default_rng(st.seed)
    d_xi, m_xi = st.dims(n_in)

    m_in = init_sgplvm(data_in.y(), _cols(data_in.factors), n_in, d_xi, m_xi, st.kernel, rng=rng,
                       spatial_lengthscale=st.spatial_lengthscale)
    m_in, r_in = sgplvm_train(m_in, st.optim, callback)

    # copy the latent posterior of the solved realisations and freeze it
    q = VariationalLatentPosterior(m_in.q.mu[solved].copy(), m_in.q.s[solved].copy())
    y_out = data_out.y()
    var = float(np.var(y_out)) or 1.0
    n_out = len(solved)
    m_out_xi = min(m_xi, n_out)
    z = q.mu[np.sort(rng.choice(n_out, size=m_out_xi, replace=False))].copy()
    k_out = make_stochastic_kernel(st.output_kernel, d_xi, lengthscales=_output_lengthscales(q),
                                   variance=var, linear_variance=var / d_xi)
    k_s = [Exponential(1, st.spatial_lengthscale) for _ in data_out.factors]
    m_out = SgplvmModel(y_out, _cols(data_out.factors), q, z, k_out, k_s, beta=100.0 / var,
                        frozen=frozenset({"latent"}))
    m_out, r_out = sgplvm_train(m_out, st.optim, callback)
    s = TwoModelSurrogate(m_in, m_out, solved, st, list(data_in.factors), list(data_out.factors))
    s.train_results = (r_in, r_out)
    return s


def forward_predict_two_model(s, input_field, factors_out=None, rng=None):
    return s.forward(input_field, factors_out=factors_out, rng=rng)


def inverse_predict_two_model(s, obs_values, obs_factors, factors_in=None, rng=None):
    return s.inverse(obs_values, obs_factors, factors_in, rng=rng)


# ------------------------------------------------------------------ jointly trained


@dataclass
class JointSurrogate:
    model: SgplvmModel
    output_scale: float
    settings: SurrogateSettings = field(default_factory=SurrogateSettings)
    factors: list = None

    def __post_init__(self):
        if not self.output_scale > 0:
            raise PipelineError("output_scale must be positive")
        self._post = None

    def posterior(self):
        if self._post is None:
            self._post = Posterior(self.model)
        return self._post

    def _stack(self, values, col):
        y = np.full((len(values), 2), np.nan)
        y[:, col] = values
        return y

    def forward(self, input_field, factors_in=None, factors_out=None, rng=None):
        p = self.posterior()
        y = self._stack(np.asarray(input_field, dtype=float).ravel(), 0)
        pred = _transfer_and_predict(p, y, _cols(factors_in or self.factors), p, _cols(factors_out or self.factors),
                                     [True, False], False, self.model.beta, self.settings, rng, col=1)
        c = self.output_scale
        pred.moments = PredictiveMoments(pred.moments.mean * c, pred.moments.variance * c**2)
        return pred

    def inverse(self, obs_values, obs_factors, factors_in=None, rng=None):
        p = self.posterior()
        y = self._stack(np.asarray(obs_values, dtype=float).ravel() / self.output_scale, 1)
        return _transfer_and_predict(p, y, _cols(obs_factors), p, _cols(factors_in or self.factors),
                                     [False, True], True, self.model.beta, self.settings, rng, col=0)


def train_joint(data_in, data_out, settings=None, callback=None, output_scale=None):
    """One model on ``[input, output / scale]``; the scale gives the outputs unit variance."""
    st = settings or SurrogateSettings()
    if data_in.n_xi != data_out.n_xi:
        raise PipelineError("joint training needs the same realisations for inputs and outputs "
                            f"(n_xi,in = n_xi,out), got {data_in.n_xi} and {data_out.n_xi}")
    if not _same_grid(data_in.factors, data_out.factors):
        raise PipelineError("joint training needs inputs and outputs on one shared spatial grid")
    scale = float(output_scale or np.std(data_out.values)) or 1.0
    y = np.column_stack([data_in.values.ravel(), data_out.values.ravel() / scale])
    rng = np.random.default_rng(st.seed)
    d_xi, m_xi = st.dims(data_in.n_xi)
    m = init_sgplvm(y, _cols(data_in.factors), data_in.n_xi, d_xi, m_xi, st.kernel, rng=rng,
                    spatial_lengthscale=st.spatial_lengthscale)
    m, res = sgplvm_train(m, st.optim, callback)
    s = JointSurrogate(m, scale, st, list(data_in.factors))
    s.train_results = (res,)
    return s


def forward_predict_joint(s, input_field, factors_out=None, rng=None):
    return s.forward(input_field, factors_out=factors_out, rng=rng)


def inverse_predict_joint(s, obs_values, obs_factors, factors_in=None, rng=None):
    return s.inverse(obs_values, obs_factors, factors_in, rng=rng)


# ------------------------------------------------------------------ PCA baseline


@dataclass
class PcaInputModel:
    components: np.ndarray
    singular_values: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    @property
    def d_xi(self):
        return self.components.shape[0]

    @classmethod
    def fit(cls, values, d_xi):
        values = np.asarray(values, dtype=float)
        mean = values.mean(axis=0)
        _, sv, Vt = np.linalg.svd(values - mean, full_matrices=False)
        d = min(d_xi, len(sv))
        # unit-variance scores, as for the latent initialisation of the GP-LVMs
        scale = sv[:d] / np.sqrt(len(values))
        scale = np.where(scale > 0, scale, 1.0)
        return cls(Vt[:d].copy(), sv[:d].copy(), mean, scale)

    def encode(self, fields):
        return ((np.atleast_2d(fields) - self.mean) @ self.components.T) / self.scale

    def decode(self, z):
        return self.mean + (np.atleast_2d(z) * self.scale) @ self.components

    def decode_variance(self, s):
        """Pointwise variance of the decoded field for independent latent variances ``s``."""
        return (np.atleast_2d(s) * self.scale**2) @ self.components**2


@dataclass
class PcaSurrogate:
    pca: PcaInputModel
    output_model: SgplvmModel
    settings: SurrogateSettings = field(default_factory=SurrogateSettings)
    factors_in: list = None
    factors_out: list = None

    def __post_init__(self):
        self._post = None

    def posterior(self):
        if self._post is None:
            self._post = Posterior(self.output_model)
        return self._post

    def forward(self, input_field, factors_in=None, factors_out=None, rng=None):
        if factors_in is not None and not _same_grid(factors_in, self.factors_in):
            raise PipelineError("the PCA input model only accepts fields on its training grid")
        z = self.pca.encode(np.asarray(input_field, dtype=float).ravel())
        q = VariationalLatentPosterior(z, np.full_like(z, PCA_LATENT_VARIANCE))
        mom = predict_marginalized(self.posterior(), q, _cols(factors_out or self.factors_out),
                                   n_mog=self.settings.n_mog, rng=rng)
        return Prediction(mom)

    def inverse(self, obs_values, obs_factors, factors_in=None, rng=None):
        if factors_in is not None and not _same_grid(factors_in, self.factors_in):
            raise PipelineError("the PCA input model only reconstructs its training grid")
        st = self.settings
        res = infer_latent(self.posterior(), np.asarray(obs_values, dtype=float).reshape(-1, 1), _cols(obs_factors),
                           optimize_beta_star=True, beta_star=self.output_model.beta, n_restarts=st.n_restarts,
                           rng=rng, settings=st.infer_optim)
        mean = self.pca.decode(res.posterior.mu_star)[0]
        var = self.pca.decode_variance(res.posterior.s_star)[0]
        return Prediction(PredictiveMoments(mean[:, None], var[:, None]), res, res.posterior.beta_star)


def train_pca(data_in, data_out, settings=None, callback=None):
    """PCA scores as fixed (near-deterministic) latents of an output GP-LVM."""
    st = settings or SurrogateSettings()
    if data_in.n_xi != data_out.n_xi:
        raise PipelineError("the PCA baseline needs a solution for every input field")
    d_xi, m_xi = st.dims(data_in.n_xi)
    pca = PcaInputModel.fit(data_in.values, d_xi)
    z = pca.encode(data_in.values)
    rng = np.random.default_rng(st.seed)
    m = init_sgplvm(data_out.y(), _cols(data_out.factors), data_out.n_xi, pca.d_xi, min(m_xi, data_out.n_xi),
                    st.output_kernel, rng=rng, spatial_lengthscale=st.spatial_lengthscale, frozen={"latent"})
    m.q = VariationalLatentPosterior(z, np.full_like(z, PCA_LATENT_VARIANCE))
    m.z_xi = z[np.sort(rng.choice(len(z), size=m.m_xi, replace=False))].copy()
    m, res = sgplvm_train(m, st.optim, callback)
    s = PcaSurrogate(pca, m, st, list(data_in.factors), list(data_out.factors))
    s.train_results = (res,)
    return s


PIPELINES = {"two_model": train_two_model, "joint": train_joint, "pca_baseline": train_pca}


def train_surrogate(pipeline, data_in, data_out, settings=None, callback=None):
    try:
        fn = PIPELINES[pipeline]
    except KeyError:
        raise PipelineError(f"unknown pipeline {pipeline!r}; expected one of {sorted(PIPELINES)}") from None
    return fn(data_in, data_out, settings, callback=callback)


# ------------------------------------------------------------------ metrics


def metrics(mean, variance, truth):
    """RMSE, the median negative log density (``mnlp``) and the median log density (``mlp``)."""
    mean, variance, truth = (np.asarray(a, dtype=float).ravel() for a in (mean, variance, truth))
    if not (mean.shape == variance.shape == truth.shape):
        raise ValueError("mean, variance and truth must have matching shapes")
    if np.any(variance <= 0):
        raise ValueError("predictive variances must be positive")
    r = mean - truth
    logp = -0.5 * (LOG2PI + np.log(variance) + r**2 / variance)
    return {
        "rmse": float(np.sqrt(np.mean(r**2))),
        "mnlp": float(np.median(-logp)),
        "mlp": float(np.median(logp)),
        "coverage_2sd": float(np.mean(np.abs(r) <= 2 * np.sqrt(variance))),
    }


def noise_level(outputs, fraction=0.1):
    """``fraction`` times the root-mean field variance of the training solutions."""
    return fraction * float(np.sqrt(np.mean(np.var(outputs.values, axis=1))))


# ------------------------------------------------------------------ evaluation


def _forward_case(args):
    s, case, field_in, truth, seed = args
    t = time.perf_counter()
    pred = s.forward(field_in, rng=_case_rng(seed, case))
    rec = {"case": case, "direction": "forward", **metrics(pred.mean, pred.variance, truth)}
    rec.update(beta_star=pred.beta_star, runtime=time.perf_counter() - t,
               mean=pred.mean.tolist(), variance=pred.variance.tolist())
    return rec


def _inverse_case(args):
    s, case, obs, truth, seed = args
    t = time.perf_counter()
    pred = s.inverse(obs.values, obs.factors, rng=_case_rng(seed, case))
    rec = {"case": case, "direction": "inverse", **metrics(pred.mean, pred.variance, truth)}
    rec.update(beta_star=pred.beta_star, runtime=time.perf_counter() - t,
               mean=pred.mean.tolist(), variance=pred.variance.tolist())
    return rec


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


def evaluate_forward(s, test_in, test_out, seed=0, jobs=1):
    """One record per test case; case ``i`` uses its own seeded stream."""
    tasks = [(s, i, test_in.values[i], test_out.values[i], seed) for i in range(test_in.n_xi)]
    return _map(_forward_case, tasks, jobs)


def evaluate_inverse(s, test_in, test_out, obs, noise_sigma, seed=0, jobs=1):
    from .elliptic import subsample_observations

    n = len(test_out.factors[0])
    tasks = []
    for i in range(test_out.n_xi):
        o = subsample_observations(test_out.values[i], n, obs, noise_sigma,
                                   seed=np.random.SeedSequence([int(seed), 104729, i]))
        tasks.append((s, i, o, test_in.values[i], seed))
    return _map(_inverse_case, tasks, jobs)
