import numpy as np
import pytest
from scipy import stats

from bnnshift.data import DependenceSpec, gen_planted
from bnnshift.models import LabeledDataset, ModelSpec
from bnnshift.numkit import ConfigError, NumericError, RngStream
from bnnshift.oracle import blr_posterior, blr_predict, grid_posterior, prior_on_grid
from bnnshift.priors import Gaussian, PriorSpec


def test_no_data_is_prior():
    mu0, s0 = np.array([0.5, -1.0]), np.array([[2.0, 0.3], [0.3, 1.0]])
    post = blr_posterior(np.zeros((0, 2)), np.zeros(0), mu0, s0, 1.0)
    np.testing.assert_allclose(post.mean, mu0, atol=1e-14)
    np.testing.assert_allclose(post.cov, s0, atol=1e-14)


def test_hand_evaluated_update():
    post = blr_posterior([[1.0, 0.0]], [1.0], np.zeros(2), np.eye(2), 1.0)
    np.testing.assert_allclose(post.cov, np.diag([0.5, 1.0]), atol=1e-15)
    np.testing.assert_allclose(post.mean, [0.5, 0.0], atol=1e-15)
    np.testing.assert_array_equal(post.map, post.mean)


def test_precision_identity_and_errors():
    gen = np.random.default_rng(0)
    phi, y = gen.standard_normal((20, 3)), gen.standard_normal(20)
    s0 = np.diag([1.0, 2.0, 0.5])
    post = blr_posterior(phi, y, np.zeros(3), s0, 0.3)
    np.testing.assert_allclose(post.precision, np.linalg.inv(s0) + phi.T @ phi / 0.3, atol=1e-8)
    with pytest.raises(NumericError):
        blr_posterior(phi, y, np.zeros(3), np.diag([1.0, 0.0, 1.0]), 0.3)
    with pytest.raises(ConfigError):
        blr_posterior(phi, y, np.zeros(3), s0, 0.0)


def test_dead_feature_marginal_is_prior():
    gen = np.random.default_rng(1)
    phi = gen.standard_normal((30, 3))
    phi[:, 1] = 0.0
    post = blr_posterior(phi, gen.standard_normal(30), np.zeros(3), np.diag([1.0, 0.7, 2.0]), 0.5)
    assert post.cov[1, 1] == pytest.approx(0.7, rel=1e-12)
    assert abs(post.mean[1]) < 1e-12
    np.testing.assert_allclose(post.cov[1, [0, 2]], 0.0, atol=1e-12)


def test_planted_direction_variance_equals_prior():
    dep = DependenceSpec("affine", c=[1.0, -2.0, 0.5, 1.0], c0=0.0)
    d = gen_planted(dep, 100, 4, RngStream(2), task="regress")
    s0 = 0.8 * np.eye(4)
    post = blr_posterior(d.inputs, d.targets, np.zeros(4), s0, 0.1)
    c = dep.c_matrix[0] / np.linalg.norm(dep.c_matrix[0])
    assert c @ post.cov @ c == pytest.approx(0.8, rel=1e-10)


def test_predictive_cases():
    gen = np.random.default_rng(3)
    phi = np.zeros((200, 3))
    phi[:, :2] = gen.standard_normal((200, 2))
    s0 = np.diag([1.0, 1.0, 1.5])
    post = blr_posterior(phi, gen.standard_normal(200), np.zeros(3), s0, 0.2)
    x = np.array([[0.3, -0.4, 0.0]])
    m, v = blr_predict(post, x)
    assert v[0] - 0.2 < 0.01
    shift = np.array([[0.0, 0.0, 2.0]])
    m2, v2 = blr_predict(post, x + shift)
    assert m2[0] == pytest.approx(m[0], abs=1e-12)
    assert v2[0] - v[0] == pytest.approx(shift[0] @ s0 @ shift[0], rel=1e-10)
    m3, v3 = blr_predict(post, x + 0.0 * shift)
    assert (m3[0], v3[0]) == (m[0], v[0])


def test_contraction_is_monotone():
    gen = np.random.default_rng(4)
    phi = gen.standard_normal((15, 4))
    prev = np.linalg.eigvalsh(2.0 * np.eye(4))
    for k in range(1, 16):
        post = blr_posterior(phi[:k], np.zeros(k), np.zeros(4), 2.0 * np.eye(4), 0.5)
        # adding a row shrinks the covariance in Loewner order
        if k > 1:
            before = blr_posterior(phi[: k - 1], np.zeros(k - 1), np.zeros(4), 2.0 * np.eye(4), 0.5).cov
            assert np.linalg.eigvalsh(before - post.cov).min() > -1e-10
        cur = np.linalg.eigvalsh(post.cov)
        assert np.all(cur <= prev + 1e-10)
        prev = cur


def _axis(std, n=201):
    return np.linspace(-6.5 * std, 6.5 * std, n)


def test_grid_dead_feature_marginal():
    spec = ModelSpec("linear", (2,), n_out=1, likelihood="bernoulli")
    gen = np.random.default_rng(5)
    x = np.c_[gen.standard_normal(40), np.zeros(40)]
    data = LabeledDataset(x, (x[:, 0] > 0).astype(int))
    prior = PriorSpec(Gaussian(1.0))
    g = grid_posterior(spec, prior, data, [_axis(1.0), _axis(1.0)])
    assert np.max(np.abs(g.marginal(1) - prior_on_grid(prior.default, g.axes[1]))) < 1e-10
    assert np.trapezoid(g.marginal(0), g.axes[0]) == pytest.approx(1.0, abs=1e-12)


def test_grid_matches_conjugate_posterior():
    spec = ModelSpec("linear", (1,), n_out=1, likelihood="gaussian", noise_var=0.5)
    gen = np.random.default_rng(6)
    x = gen.standard_normal((10, 1))
    data = LabeledDataset(x, 0.7 * x + 0.3 * gen.standard_normal((10, 1)))
    g = grid_posterior(spec, PriorSpec(Gaussian(1.0)), data, [np.linspace(-6.5, 6.5, 401)])
    post = blr_posterior(x, data.targets, np.zeros(1), np.eye(1), 0.5)
    exact = stats.norm(post.mean[0], np.sqrt(post.cov[0, 0])).pdf(g.axes[0])
    assert np.max(np.abs(g.marginal(0) - exact)) < 1e-6


def test_grid_refinement_converges():
    spec = ModelSpec("linear", (1,), n_out=1, likelihood="bernoulli")
    x = np.linspace(-1, 1, 12)[:, None]
    data = LabeledDataset(x, (x[:, 0] > 0.1).astype(int))
    prior = PriorSpec(Gaussian(1.0))
    lz = [grid_posterior(spec, prior, data, [np.linspace(-7, 7, n)]).log_normalizer for n in (11, 21, 41, 81)]
    d = np.abs(np.diff(lz))
    # each halving of the spacing cuts the change at least fourfold
    assert np.all(d[1:] <= d[:-1] / 4)
    assert d[-1] < 1e-9


def test_grid_nalu_rotated_marginal():
    spec = ModelSpec("nalu", (2,), n_out=1, likelihood="gaussian", noise_var=0.05)
    dep = DependenceSpec("multiplicative", p=[1.0, 1.0])
    d = gen_planted(dep, 50, 2, RngStream(7), task="regress", scales=0.5, noise_var=0.05)
    p = np.asarray(dep.p)
    basis = np.column_stack([p, [-p[1], p[0]]])
    prior = PriorSpec(Gaussian(1.0))
    g = grid_posterior(spec, prior, d, [_axis(1.0), _axis(1.0)], basis=basis)
    assert np.max(np.abs(g.marginal(0) - prior_on_grid(prior.default, g.axes[0]))) < 1e-8


def test_grid_limits():
    prior = PriorSpec(Gaussian(1.0))
    big = ModelSpec("linear", (4,), n_out=1, likelihood="gaussian")
    with pytest.raises(ConfigError):
        grid_posterior(big, prior, None, [_axis(1.0)] * 4)
    one = ModelSpec("linear", (1,), n_out=1, likelihood="gaussian")
    with pytest.raises(ConfigError):
        grid_posterior(one, prior, None, [np.linspace(-2, 2, 11)])
    with pytest.raises(ConfigError):
        grid_posterior(one, prior, None, [np.linspace(-7, 7, 403)])
