import numpy as np
import pytest

from structgp import elliptic as E
from structgp import pipeline as P
from structgp.optim import OptimSettings


def fast(**kw):
    base = dict(kernel="sum", optim=OptimSettings(max_iter=150), infer_optim=OptimSettings(max_iter=100, tol=1e-3),
                n_mog=20, n_restarts=2)
    base.update(kw)
    return P.SurrogateSettings(**base)


@pytest.fixture(scope="module")
def data():
    cfg = E.PriorConfig(n_grid=9, d_kl2=16, seed=1)
    tr_in, tr_out = E.generate(cfg, 12)
    te_in, te_out = E.generate(cfg, 3, start=1000)
    return tr_in, tr_out, te_in, te_out


@pytest.fixture(scope="module")
def two_model(data):
    return P.train_two_model(data[0], data[1], fast())


@pytest.fixture(scope="module")
def joint(data):
    return P.train_joint(data[0], data[1], fast())


# ------------------------------------------------------------------ metrics


def test_metrics_closed_forms():
    t = np.random.default_rng(0).standard_normal(50)
    m = P.metrics(t, np.ones(50), t)
    assert m["rmse"] == 0
    assert m["mnlp"] == pytest.approx(0.5 * np.log(2 * np.pi))
    assert m["mlp"] == pytest.approx(-0.5 * np.log(2 * np.pi))
    m = P.metrics(t + 1, np.ones(50), t)
    assert m["rmse"] == pytest.approx(1.0)
    assert m["mnlp"] == pytest.approx(0.5 * (np.log(2 * np.pi) + 1))


def test_metrics_random_instance():
    rng = np.random.default_rng(1)
    mu, v, y = rng.standard_normal(31), rng.uniform(0.1, 2, 31), rng.standard_normal(31)
    m = P.metrics(mu, v, y)
    nlp = [0.5 * np.log(2 * np.pi * vi) + (yi - mi) ** 2 / (2 * vi) for mi, vi, yi in zip(mu, v, y)]
    assert m["rmse"] == pytest.approx(np.sqrt(np.mean((mu - y) ** 2)), rel=1e-14)
    assert m["mnlp"] == pytest.approx(sorted(nlp)[15], rel=1e-12)
    assert m["mlp"] == pytest.approx(-sorted(nlp)[15], rel=1e-12)


def test_metrics_errors():
    with pytest.raises(ValueError):
        P.metrics(np.zeros(3), np.array([1.0, 0.0, 1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        P.metrics(np.zeros(3), np.ones(4), np.zeros(3))


# ------------------------------------------------------------------ PCA


def test_pca_components_orthonormal():
    vals = np.random.default_rng(2).standard_normal((20, 30))
    p = P.PcaInputModel.fit(vals, 6)
    np.testing.assert_allclose(p.components @ p.components.T, np.eye(6), atol=1e-10)
    z = p.encode(vals)
    np.testing.assert_allclose(z.var(axis=0), 1.0, rtol=1e-10)
    full = P.PcaInputModel.fit(vals, 20)
    np.testing.assert_allclose(full.decode(full.encode(vals)), vals, atol=1e-10)


# ------------------------------------------------------------------ two-model


def test_two_model_shares_latents_bit_exactly(two_model):
    s = two_model
    np.testing.assert_array_equal(np.arange(12), s.solved)
    assert s.output_model.q.mu.tobytes() == s.input_model.q.mu.tobytes()
    assert s.output_model.q.s.tobytes() == s.input_model.q.s.tobytes()
    assert "latent" in s.output_model.frozen
    for r in s.train_results:
        assert np.isfinite(r.bound) and r.bound > r.initial_bound


def test_two_model_pruned_subset(data):
    tr_in, tr_out = data[0], data[1]
    solved = np.array([0, 2, 3, 7, 9, 11])
    s = P.train_two_model(tr_in, tr_out.subset(solved), fast(optim=OptimSettings(max_iter=40)), solved=solved)
    assert s.output_model.q.mu.tobytes() == s.input_model.q.mu[solved].tobytes()
    with pytest.raises(P.PipelineError):
        P.train_two_model(tr_in, tr_out.subset([]), fast(), solved=np.array([], int))
    with pytest.raises(P.PipelineError):
        P.train_two_model(tr_in, tr_out.subset([0, 1]), fast(), solved=[0, 0])


def test_two_model_forward(two_model, data):
    te_in, te_out = data[2], data[3]
    a = two_model.forward(te_in.values[0], rng=3)
    b = two_model.forward(te_in.values[0], rng=3)
    assert a.mean.tobytes() == b.mean.tobytes() and a.variance.tobytes() == b.variance.tobytes()
    assert np.all(a.variance > 0)
    assert a.mean.shape == (81,)


def test_two_model_forward_on_training_case(two_model, data):
    tr_in, tr_out, te_in, te_out = data
    train = np.mean([P.metrics(*(lambda p: (p.mean, p.variance))(two_model.forward(tr_in.values[i], rng=i)),
                               tr_out.values[i])["rmse"] for i in range(3)])
    held = np.mean([P.metrics(*(lambda p: (p.mean, p.variance))(two_model.forward(te_in.values[i], rng=i)),
                              te_out.values[i])["rmse"] for i in range(3)])
    assert train <= 2 * held


def test_two_model_inverse(two_model, data):
    te_out = data[3]
    obs = E.subsample_observations(te_out.values[0], 9, 3, 0.001, seed=0)
    pred = two_model.inverse(obs.values, obs.factors, rng=0)
    assert pred.mean.shape == (81,) and np.all(pred.variance > 0)
    assert pred.beta_star > 0


def test_inverse_weak_data_returns_prior_scale_variance(two_model, data):
    # a single noisy interior observation says little about the far field
    import copy

    from structgp.kernels import VariationalLatentPosterior
    from structgp.predictive import predict_marginalized

    s = copy.copy(two_model)
    s.settings = fast(n_mog=100, n_restarts=5)
    d = s.input_model.d_xi
    prior = predict_marginalized(s.posteriors()[0], VariationalLatentPosterior(np.zeros((1, d)), np.ones((1, d))),
                                 [f[:, None] for f in s.factors_in], n_mog=2000, rng=0)
    far = np.arange(81).reshape(9, 9)[5:, 5:].ravel()
    ratios = []
    for c in range(3):
        obs = E.subsample_observations(data[3].values[c], 9, [[0.25], [0.25]], P.noise_level(data[1]), seed=c)
        pred = s.inverse(obs.values, obs.factors, rng=c)
        ratios.append(np.mean(pred.variance[far]) / np.mean(prior.variance[far, 0]))
    assert 0.8 <= np.mean(ratios) <= 1.2


def test_inverse_reflection_equivariance(data):
    # mirroring every training field in x2 leaves the bound unchanged (the
    # spatial kernel is persymmetric on the symmetric grid), so inverting
    # mirrored data with the mirrored model gives the mirrored answer
    tr_in, tr_out, _, te_out = data
    n = 9

    def mirror(v):
        return v.reshape(-1, n, n)[:, :, ::-1].reshape(len(v), -1)

    st = fast(optim=OptimSettings(max_iter=30), n_restarts=1)
    a = P.train_joint(tr_in, tr_out, st)
    b = P.train_joint(E.FieldDataset(mirror(tr_in.values), tr_in.factors, tr_in.kind),
                      E.FieldDataset(mirror(tr_out.values), tr_out.factors, tr_out.kind), st)
    obs = E.subsample_observations(te_out.values[0], n, 3, 0.0)
    pa = a.inverse(obs.values, obs.factors, rng=0)
    pb = b.inverse(obs.values.reshape(3, 3)[:, ::-1].ravel(), obs.factors, rng=0)
    np.testing.assert_allclose(mirror(pa.mean[None])[0], pb.mean, atol=1e-6)
    np.testing.assert_allclose(mirror(pa.variance[None])[0], pb.variance, rtol=1e-6)


# ------------------------------------------------------------------ joint


def test_joint_trains_and_predicts(joint, data):
    s = joint
    r = s.train_results[0]
    assert np.isfinite(r.bound) and r.bound > r.initial_bound
    assert s.output_scale == pytest.approx(np.std(data[1].values))
    f = s.forward(data[2].values[0], rng=0)
    assert np.all(f.variance > 0)
    obs = E.subsample_observations(data[3].values[0], 9, 3, 0.001)
    i = s.inverse(obs.values, obs.factors, rng=0)
    assert np.all(i.variance > 0) and i.mean.shape == (81,)


def test_joint_rejects_mismatched_data(data):
    tr_in, tr_out = data[0], data[1]
    with pytest.raises(P.PipelineError, match="n_xi"):
        P.train_joint(tr_in, tr_out.subset(np.arange(5)), fast())
    coarse = E.FieldDataset(np.zeros((12, 25)), E.grid_factors(5), "solution_hat")
    with pytest.raises(P.PipelineError, match="grid"):
        P.train_joint(tr_in, coarse, fast())


def test_joint_masked_column_is_ignored(joint, data):
    s = joint
    post = s.posterior()
    from structgp.predictive import infer_latent

    y = np.column_stack([data[2].values[0], np.zeros(81)])
    a = infer_latent(post, y, [f[:, None] for f in s.factors], mask=[True, False], rng=0,
                     beta_star=s.model.beta, n_restarts=2)
    y[:, 1] = 1e3 * np.random.default_rng(0).standard_normal(81)
    b = infer_latent(post, y, [f[:, None] for f in s.factors], mask=[True, False], rng=0,
                     beta_star=s.model.beta, n_restarts=2)
    assert a.posterior.mu_star.tobytes() == b.posterior.mu_star.tobytes()


def test_joint_output_scale_round_trip(data):
    tr_in, tr_out = data[0], data[1]
    st = fast(optim=OptimSettings(max_iter=40), n_restarts=1)
    a = P.train_joint(tr_in, tr_out, st)
    doubled = E.FieldDataset(2 * tr_out.values, tr_out.factors, tr_out.kind)
    b = P.train_joint(tr_in, doubled, st)
    assert b.output_scale == pytest.approx(2 * a.output_scale, rel=1e-12)
    np.testing.assert_allclose(a.model.get_params(), b.model.get_params(), rtol=1e-8, atol=1e-10)
    obs = E.subsample_observations(data[3].values[0], 9, 3, 0.0)
    pa = a.inverse(obs.values, obs.factors, rng=0)
    pb = b.inverse(2 * obs.values, obs.factors, rng=0)
    np.testing.assert_allclose(pa.mean, pb.mean, rtol=1e-8, atol=1e-8)


# ------------------------------------------------------------------ PCA baseline and evaluation


def test_pca_baseline(data):
    s = P.train_pca(data[0], data[1], fast(optim=OptimSettings(max_iter=60)))
    f = s.forward(data[2].values[0], rng=0)
    assert np.all(f.variance > 0)
    obs = E.subsample_observations(data[3].values[0], 9, 3, 0.001)
    i = s.inverse(obs.values, obs.factors, rng=0)
    assert np.all(i.variance > 0)
    with pytest.raises(P.PipelineError):
        s.forward(np.zeros(25), factors_in=E.grid_factors(5))


def test_evaluation_records(two_model, data):
    te_in, te_out = data[2], data[3]
    recs = P.evaluate_forward(two_model, te_in, te_out, seed=4)
    again = P.evaluate_forward(two_model, te_in, te_out, seed=4)
    assert [r["rmse"] for r in recs] == [r["rmse"] for r in again]
    assert {"case", "rmse", "mnlp", "mlp", "runtime", "mean", "variance"} <= set(recs[0])
    inv = P.evaluate_inverse(two_model, te_in, te_out, 3, 0.001, seed=4)
    assert all(r["beta_star"] > 0 for r in inv)
    assert P.evaluate_forward(two_model, te_in.subset([]), te_out.subset([])) == []


def test_unknown_pipeline(data):
    with pytest.raises(P.PipelineError):
        P.train_surrogate("three_model", data[0], data[1])
