from decimal import Decimal, localcontext

import numpy as np
import pytest
from scipy.stats import norm

from conftest import noiseless_piecewise_spec, quick_config, two_level_curves
from curvemix.dataset import CurveSet, generate
from curvemix.errors import EmptyCluster, FitFailed, InvalidData, SingularSegment
from curvemix.metrics import misclassification
from curvemix.mixture import ModelKind, _reseed_empty
from curvemix.piecewise import PiecewiseModel, PolyBasis, SegmentFit, Segmentation
from curvemix.pwrm_em import PwrmMixture, PwrmParams, e_step, fit_em, log_density_per_cluster, m_step


def _constant_model(grid, level: float, sigma2: float) -> PiecewiseModel:
    m = grid.size
    fit = SegmentFit(start=0, end=m, beta=np.array([level]), sigma2=sigma2, weighted_sse=0.0, cost=0.0)
    return PiecewiseModel(basis=PolyBasis(0, grid), segmentation=Segmentation((0, m)), fits=(fit,), total_cost=0.0)


def test_density_of_the_mean_curve_with_unit_variance():
    grid = np.array([1.0, 2.0])
    params = PwrmParams(alpha=np.array([1.0]), clusters=(_constant_model(grid, 0.0, 1.0),), degree=0)
    curves = CurveSet(values=np.zeros((1, 2)), grid=grid)
    assert log_density_per_cluster(curves, params)[0, 0] == pytest.approx(-np.log(2 * np.pi))


@pytest.mark.parametrize("pooled", [False, True])
def test_log_density_matches_pointwise_normal_sum(pooled):
    curves = two_level_curves(n_per_cluster=4, m=12, sd=0.5)
    config = quick_config(n_clusters=2, n_regimes=[2, 3], degree=1, pooled_variance=pooled)
    tau = np.random.default_rng(0).dirichlet([1.0, 1.0], size=curves.n_curves)
    params = m_step(curves, tau, config)

    means, variances = params.means(), params.variances()
    expected = np.array(
        [
            [norm.logpdf(y, loc=means[k], scale=np.sqrt(variances[k])).sum() for k in range(2)]
            for y in curves.values
        ]
    )
    np.testing.assert_allclose(log_density_per_cluster(curves, params), expected, rtol=1e-10)


def test_e_step_posteriors():
    alpha = np.array([0.5, 0.5])
    np.testing.assert_allclose(e_step(np.log([[0.2, 0.6]]), alpha), [[0.25, 0.75]])
    np.testing.assert_allclose(e_step(np.zeros((3, 2)), alpha), np.full((3, 2), 0.5))

    tau = e_step(np.array([[-1000.0, 0.0], [-5000.0, -5001.0]]), alpha)
    assert np.all(np.isfinite(tau))
    np.testing.assert_allclose(tau.sum(axis=1), 1.0)
    assert tau[0, 1] == pytest.approx(1.0)
    assert tau[1, 0] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)))


def test_e_step_against_high_precision_softmax():
    rng = np.random.default_rng(8)
    log_densities = rng.normal(scale=200.0, size=(5, 3))
    alpha = np.array([0.2, 0.5, 0.3])
    with localcontext() as ctx:
        ctx.prec = 60
        joint = [[Decimal(float(v)) + Decimal(float(a)).ln() for v, a in zip(row, alpha)] for row in log_densities]
        expected = []
        for row in joint:
            top = max(row)
            weights = [(v - top).exp() for v in row]
            total = sum(weights)
            expected.append([float(w / total) for w in weights])
    assert np.max(np.abs(e_step(log_densities, alpha) - np.array(expected))) < 1e-12
    np.testing.assert_allclose(e_step(np.zeros((4, 2)), np.array([1.0, 0.0]))[:, 0], 1.0)


def test_m_step_reports_the_empty_cluster():
    curves = two_level_curves(n_per_cluster=3)
    tau = np.zeros((curves.n_curves, 2))
    tau[:, 0] = 1.0
    with pytest.raises(EmptyCluster) as info:
        m_step(curves, tau, quick_config(n_clusters=2, degree=0))
    assert info.value.clusters == [1]


def test_m_step_checks_the_posterior_shape():
    curves = two_level_curves(n_per_cluster=3)
    with pytest.raises(InvalidData):
        m_step(curves, np.full((curves.n_curves, 3), 1 / 3), quick_config(n_clusters=2))


def test_uniform_posteriors_give_identical_clusters():
    curves = two_level_curves(n_per_cluster=5, sd=1.0)
    config = quick_config(n_clusters=2, n_regimes=2, degree=1)
    params = m_step(curves, np.full((curves.n_curves, 2), 0.5), config)
    np.testing.assert_allclose(params.alpha, [0.5, 0.5])
    np.testing.assert_allclose(params.means()[0], params.means()[1])
    assert params.clusters[0].segmentation == params.clusters[1].segmentation


def test_noiseless_clusters_and_boundaries_are_recovered():
    curves = generate(noiseless_piecewise_spec(n=20, seed=3))
    config = quick_config(
        n_clusters=2, n_regimes=5, degree=1, init="labels", initial_labels=curves.labels.tolist(), n_restarts=1
    )
    fit = fit_em(curves, config)
    np.testing.assert_array_equal(fit.labels, curves.labels)
    boundaries = [model.segmentation.boundaries for model in fit.params.clusters]
    assert boundaries == [(0, 20, 60, 115, 140, 160), (0, 20, 70, 90, 140, 160)]
    assert fit.model_kind is ModelKind.PWRM_EM


def test_single_cluster_log_likelihood_is_the_plug_in_value():
    rng = np.random.default_rng(4)
    curves = CurveSet(values=rng.normal(size=(8, 30)), grid=np.arange(30.0))
    fit = fit_em(curves, quick_config(n_clusters=1, n_regimes=3, degree=1))
    n, m = curves.values.shape
    total_cost = fit.params.clusters[0].total_cost
    assert fit.log_likelihood == pytest.approx(-0.5 * (n * m * np.log(2 * np.pi) + total_cost), rel=1e-9)
    np.testing.assert_allclose(fit.posteriors, 1.0)


def test_separable_clusters_get_confident_posteriors(separable):
    fit = fit_em(separable, quick_config(n_clusters=2, n_regimes=1, degree=0))
    assert fit.converged
    assert misclassification(separable.labels, fit.labels)[0] == 0.0
    assert np.all(fit.posteriors.max(axis=1) > 1 - 1e-6)


def test_log_likelihood_never_decreases(table1_small):
    fit = fit_em(table1_small, quick_config(n_clusters=2, n_regimes=5, degree=1))
    trace = np.asarray(fit.trace)
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[:-1]))
    assert fit.trace[-1] == pytest.approx(fit.log_likelihood)


def test_shifting_every_curve_changes_nothing():
    curves = two_level_curves(n_per_cluster=6, m=15, sd=0.3, seed=2)
    config = quick_config(n_clusters=2, n_regimes=2, degree=1)
    fit = fit_em(curves, config)
    shifted = fit_em(curves.with_values(curves.values + 100.0), config)
    np.testing.assert_array_equal(fit.labels, shifted.labels)
    assert shifted.log_likelihood == pytest.approx(fit.log_likelihood, rel=1e-6)


def test_reordering_curves_permutes_the_result():
    curves = two_level_curves(n_per_cluster=6, m=15, sd=0.3, seed=2)
    order = np.random.default_rng(9).permutation(curves.n_curves)
    reordered = CurveSet(values=curves.values[order], grid=curves.grid, labels=curves.labels[order])
    config = quick_config(n_clusters=2, n_regimes=1, degree=0)
    fit = fit_em(curves, config)
    other = fit_em(reordered, config)
    assert misclassification(fit.labels[order], other.labels)[0] == 0.0
    assert other.log_likelihood == pytest.approx(fit.log_likelihood, rel=1e-9)


def test_every_restart_failing_raises(monkeypatch, separable):
    def broken(self, weights):
        raise SingularSegment("forced")

    monkeypatch.setattr(PwrmMixture, "m_step", broken)
    with pytest.raises(FitFailed) as info:
        fit_em(separable, quick_config(n_clusters=2, degree=0, n_restarts=3))
    assert len(info.value.diagnostics) == 3


def test_invalid_initial_partitions_are_user_errors(separable):
    with pytest.raises(InvalidData):
        fit_em(separable, quick_config(n_clusters=2, init="labels", initial_labels=[0, 1]))
    with pytest.raises(InvalidData):
        fit_em(separable, quick_config(n_clusters=2, init="labels", initial_labels=[0] * separable.n_curves))
    with pytest.raises(InvalidData):
        fit_em(two_level_curves(n_per_cluster=1), quick_config(n_clusters=3))


def test_empty_cluster_is_reseeded_from_the_least_confident_curve(separable):
    mixture = PwrmMixture(separable, quick_config(n_clusters=2, n_regimes=1, degree=0))
    tau = np.zeros((separable.n_curves, 2))
    tau[:, 0] = 1.0
    tau[4] = [0.6, 0.4]
    weights = tau.copy()
    weights[4] = [1.0, 0.0]
    events = []
    params, used = _reseed_empty(mixture, weights, tau, 3, events)
    np.testing.assert_array_equal(used[4], [0.0, 1.0])
    assert events == [(3, "cluster 1 empty; reseeded from curve 4")]
    np.testing.assert_allclose(params.means()[1], separable.values[4].mean())
