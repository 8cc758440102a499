import numpy as np
import pytest
from helpers import central_diff, rel_err
from scipy import integrate, stats

from bnnshift.models import ModelSpec
from bnnshift.numkit import ConfigError, RngStream
from bnnshift.priors import (
    CovariancePrior, ExpNorm, Gaussian, Laplace, PriorSpec, StudentT, SumFilter, build_empcov,
    build_pca_prior, build_sumfilter, prior_logpdf_grad, sample_prior,
)
from bnnshift.models import ParamVector

CNN = ModelSpec("cnn", (5, 5, 1), kernel=3, filters=3)


def test_gaussian_normalizer():
    lp, g = Gaussian(1.0).logpdf_grad(np.zeros(7))
    assert lp == pytest.approx(-3.5 * np.log(2 * np.pi), rel=1e-15)
    assert np.all(g == 0)


def test_laplace_table_scale():
    a = np.sqrt(1 / 6)
    w = np.array([0.5, -0.25, 0.25])
    lp, _ = Laplace(a).logpdf_grad(w)
    assert lp == pytest.approx(-np.sqrt(6) - 3 * np.log(2 * a), rel=1e-14)


FAMILIES = [Gaussian(0.7), Laplace(0.4), StudentT(3.0, 0.5), ExpNorm(1.5, 0.3), ExpNorm(2.0, 0.3), ExpNorm(3.0, 0.3)]


@pytest.mark.parametrize("fam", FAMILIES, ids=lambda f: type(f).__name__ + str(getattr(f, "p", "")))
def test_family_gradients(fam):
    gen = np.random.default_rng(0)
    for _ in range(50):
        w = gen.standard_normal(4)
        w = np.where(np.abs(w) < 0.05, 0.3, w)  # keep away from kinks
        g = fam.logpdf_grad(w)[1]
        assert rel_err(g, central_diff(lambda x: fam.logpdf_grad(x)[0], w)) < 1e-5


def test_student_t_density_is_normalised():
    f = StudentT(4.0, 0.3)
    z, _ = integrate.quad(lambda t: np.exp(f.logpdf_grad(np.array([t]))[0]), -np.inf, np.inf)
    assert z == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(ConfigError):
        StudentT(0.0, 1.0)


def test_gaussian_draw_variance():
    x = Gaussian(0.01).sample(RngStream(1).generator(), 100_000)
    assert 0.0097 <= x.var(ddof=1) <= 0.0103


def test_laplace_and_expnorm_draws():
    gen = RngStream(2).generator()
    assert np.var(Laplace(0.5).sample(gen, 200_000)) == pytest.approx(0.5, rel=0.02)
    e2 = ExpNorm(2.0, 0.4).sample(gen, 200_000)
    assert np.var(e2) == pytest.approx(0.4, rel=0.02)
    e1 = ExpNorm(1.0, 0.5).sample(gen, 200_000)
    assert stats.kstest(e1, stats.laplace(scale=1.0).cdf).statistic < 0.01
    f = ExpNorm(3.0, 0.2)
    assert np.std(f.sample(gen, 200_000)) == pytest.approx(f.std, rel=0.02)


def test_student_t_kurtosis():
    # excess kurtosis 6 / (nu - 4). At nu = 6 the estimator itself has
    # infinite variance, so take the median over independent batches.
    gen = RngStream(3).generator()
    est = [stats.kurtosis(StudentT(6.0, 1.0).sample(gen, 1_000_000)) for _ in range(5)]
    assert np.median(est) == pytest.approx(3.0, rel=0.2)
    x = StudentT(10.0, 2.0).sample(gen, 1_000_000)
    assert stats.kurtosis(x) == pytest.approx(1.0, rel=0.1)


def _plane_data(n=400, seed=0):
    gen = np.random.default_rng(seed)
    c = np.array([1.0, 2.0, -1.0, 0.5])
    c /= np.linalg.norm(c)
    x = gen.standard_normal((n, 4))
    x -= np.outer(x @ c, c)
    return x, c


def test_empcov_planted_direction_gets_eps():
    x, c = _plane_data()
    p = build_empcov(x + 0.7, alpha=2.0, eps=1e-3)
    assert p.variance_along(c) == pytest.approx(1e-3, rel=1e-10)
    assert np.min(p.eigenvalues) >= 1e-3 - 1e-10
    assert p.include_bias and p.dim == 5
    np.testing.assert_allclose(p.data_mean, x.mean(axis=0) + 0.7, atol=1e-14)


def test_empcov_isotropic_data():
    x = np.random.default_rng(1).standard_normal((20_000, 3))
    p = build_empcov(x, alpha=1.5, eps=0.01, include_bias=False)
    np.testing.assert_allclose(p.cov, 1.51 * np.eye(3), atol=0.05)


def test_empcov_patches_of_constant_images():
    v = np.random.default_rng(2).standard_normal(50)
    patches = np.repeat(v[:, None], 9, axis=1)
    p = build_empcov(patches, alpha=1.0, eps=1e-4, include_bias=False)
    w = p.eigenvalues
    np.testing.assert_allclose(w[1:], 1e-4, rtol=1e-8)
    assert abs(p.eigenvectors[:, 0] @ np.ones(9)) / 3 > 1 - 1e-12
    assert w[0] == pytest.approx(9 * v.var(ddof=1) + 1e-4, rel=1e-10)
    same = build_empcov(np.ones((10, 9)) * 0.3, alpha=1.0, eps=1e-4, include_bias=False)
    np.testing.assert_allclose(same.cov, 1e-4 * np.eye(9), atol=1e-18)


def test_empcov_needs_two_points():
    with pytest.raises(ConfigError):
        build_empcov(np.ones((1, 3)), 1.0)


def test_empcov_null_space_draws():
    x, c = _plane_data(seed=3)
    spec = ModelSpec("mlp", (4,), hidden=(5,))
    eps = 1e-3
    bound = PriorSpec(Gaussian(1.0), build_empcov(x, 1.0, eps)).bind(spec.layout())
    gen = RngStream(4).generator()
    proj = []
    for _ in range(2000):
        w = bound.sample(gen)
        proj.extend(c @ w[:20].reshape(4, 5))
    assert 0.8 * eps <= np.var(proj, ddof=1) <= 1.2 * eps


def test_pca_prior_spectra():
    x = np.random.default_rng(5).standard_normal((300, 3)) * [3.0, 1.0, 0.2]
    iso = build_pca_prior(x, alpha=2.0, eps=0.1, decay=1.0)
    np.testing.assert_allclose(iso.cov, 2.1 * np.eye(3), atol=1e-12)
    p = build_pca_prior(x, alpha=2.0, eps=0.1, decay=0.5)
    v = p.eigenvectors
    # data components, descending
    from bnnshift.analysis import pca
    basis = pca(x)
    for i, s in enumerate([0.5, 0.25, 0.125]):
        u = basis.components[:, i]
        assert u @ p.cov @ u == pytest.approx(2.0 * s + 0.1, rel=1e-10)
    assert v.shape == (3, 3)
    with pytest.raises(ConfigError):
        build_pca_prior(x, 1.0, decay=1.5)


def test_pca_prior_recovers_empcov():
    x = np.random.default_rng(6).standard_normal((100, 4)) @ np.diag([2.0, 1.0, 0.5, 0.1])
    from bnnshift.analysis import pca
    lam = pca(x).variances
    a = build_pca_prior(x, alpha=1.3, eps=1e-3, decay=lam)
    b = build_empcov(x, alpha=1.3, eps=1e-3, include_bias=False)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-10)


def test_covariance_sidecar_round_trip(tmp_path):
    x, _ = _plane_data(n=50)
    p = build_empcov(x, 1.0, 1e-3)
    p.save(tmp_path / "cov.bin")
    q = CovariancePrior.load(tmp_path / "cov.bin")
    np.testing.assert_array_equal(q.factor, p.factor)
    np.testing.assert_array_equal(q.data_mean, p.data_mean)
    np.testing.assert_allclose(q.cov, p.cov, atol=1e-14)


def test_sumfilter_zero_sum_and_monotone():
    sf = SumFilter(1.0, 0.5)
    cols = np.array([0.5, -0.5, 1.25, -1.25, 0.0, 2.0, -2.0, 0.75, -0.75, 0.3])[:, None]
    assert cols[:9].sum() == 0.0
    _, g = sf.logpdf_grad(cols)
    np.testing.assert_array_equal(g, -cols)
    # the Laplace factor alone falls as the filter sum grows
    u = np.r_[np.ones(9), 0.0]
    extra = []
    for t in np.linspace(0.0, 1.0, 11):
        w = cols[:, 0] + t * u
        extra.append(sf.logpdf_grad(w[:, None])[0] - Gaussian(1.0).logpdf_grad(w)[0])
    assert np.all(np.diff(extra) < 0)


def test_sumfilter_gradient():
    sf = SumFilter(0.8, 0.3)
    gen = np.random.default_rng(8)
    for _ in range(50):
        cols = gen.standard_normal((10, 3))
        if np.min(np.abs(cols[:9].sum(axis=0))) <= 0.01:
            continue
        g = sf.logpdf_grad(cols)[1]
        fd = central_diff(lambda w: sf.logpdf_grad(w.reshape(10, 3))[0], cols.ravel())
        assert rel_err(g.ravel(), fd) < 1e-5


def test_sumfilter_sampler_exact():
    v, g2, d = 1.0, 0.2, 9
    sf = SumFilter(v, g2)
    cols = sf.sample_cols(RngStream(9).generator(), d, 20_000)
    t = cols[:d].sum(axis=0) / np.sqrt(d)

    def dens(s):
        return np.exp(-s * s / (2 * v) - np.sqrt(d) * abs(s) / g2)

    z = integrate.quad(dens, -np.inf, np.inf)[0]
    cdf = np.vectorize(lambda s: integrate.quad(dens, -np.inf, s)[0] / z)
    assert stats.kstest(t, cdf).pvalue > 0.01
    # orthogonal complement stays N(0, v)
    u = np.ones(d) / 3
    resid = cols[:d] - np.outer(u, u @ cols[:d])
    assert np.var(resid[0]) == pytest.approx(v * (1 - 1 / d), rel=0.03)


def test_sumfilter_needs_conv():
    with pytest.raises(ConfigError):
        build_sumfilter(1.0, 0.1, ModelSpec("mlp", (4,), hidden=(2,)))
    with pytest.raises(ConfigError):
        PriorSpec(Gaussian(1.0), SumFilter(1.0, 0.1)).bind(ModelSpec("mlp", (4,), hidden=(2,)).layout())
    p = build_sumfilter(1.0, 0.1, CNN)
    draw = sample_prior(p, CNN.layout(), RngStream(0))
    assert draw.data.shape == (CNN.n_params,)


def test_composite_logpdf_splits_blocks():
    x, _ = _plane_data(n=30)
    spec = ModelSpec("mlp", (4,), hidden=(3,))
    cov = build_empcov(x, 1.0, 1e-2)
    prior = PriorSpec(Gaussian(0.5), cov)
    theta = np.random.default_rng(10).standard_normal(spec.n_params)
    lp, g = prior_logpdf_grad(prior, ParamVector(theta, spec.layout()))
    cols = theta[:15].reshape(5, 3)
    lp1 = sum(stats.multivariate_normal(np.zeros(5), cov.cov).logpdf(cols[:, j]) for j in range(3))
    lp2 = stats.norm(0, np.sqrt(0.5)).logpdf(theta[15:]).sum()
    assert lp == pytest.approx(lp1 + lp2, rel=1e-10)
    fd = central_diff(lambda t: prior.bind(spec.layout()).logpdf_grad(t)[0], theta)
    assert rel_err(g, fd) < 1e-6
