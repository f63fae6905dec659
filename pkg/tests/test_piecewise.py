import itertools

import numpy as np
import pytest

from conftest import noiseless_piecewise_spec
from curvemix.dataset import CurveSet, generate
from curvemix.errors import EmptyCluster, InfeasibleSegmentation, InvalidData
from curvemix.piecewise import (
    PolyBasis,
    Segmentation,
    check_feasible,
    fit_piecewise,
    fit_segments,
    optimal_segmentation,
    random_segmentation,
    segment_cost_table,
    uniform_segmentation,
    variance_floor,
    weighted_segment_fit,
)


def _random_curves(n=6, m=12, seed=0) -> CurveSet:
    rng = np.random.default_rng(seed)
    return CurveSet(values=rng.normal(size=(n, m)), grid=np.linspace(0.0, 3.0, m))


def _brute_force(table: np.ndarray, n_segments: int, min_length: int):
    m = table.shape[0] - 1
    best, best_cost = None, np.inf
    for inner in itertools.combinations(range(1, m), n_segments - 1):
        boundaries = (0,) + inner + (m,)
        if any(b - a < min_length for a, b in zip(boundaries, boundaries[1:])):
            continue
        cost = sum(table[a, b] for a, b in zip(boundaries, boundaries[1:]))
        if cost < best_cost:
            best, best_cost = boundaries, cost
    return best, best_cost


def test_basis_rows_live_on_unit_interval():
    basis = PolyBasis(degree=2, grid=np.array([2.0, 4.0, 6.0]))
    np.testing.assert_allclose(basis.rows, [[1, 0, 0], [1, 0.5, 0.25], [1, 1, 1]])
    assert basis.min_segment_length == 3


def test_dynamic_program_matches_enumeration():
    rng = np.random.default_rng(42)
    for _ in range(200):
        m = int(rng.integers(4, 11))
        min_length = int(rng.integers(1, 3))
        n_segments = int(rng.integers(1, min(4, m // min_length) + 1))
        table = np.triu(rng.uniform(0.0, 10.0, size=(m + 1, m + 1)), k=1)
        segmentation, total = optimal_segmentation(table, n_segments, min_length=min_length)
        expected, expected_total = _brute_force(table, n_segments, min_length)
        assert segmentation.boundaries == expected
        assert total == pytest.approx(expected_total, rel=1e-12)


def test_ties_take_the_smallest_boundaries():
    zeros = np.zeros((5, 5))
    assert optimal_segmentation(zeros, 2)[0].boundaries == (0, 1, 4)
    assert optimal_segmentation(zeros, 3)[0].boundaries == (0, 1, 2, 4)


@pytest.mark.parametrize("criterion", ["likelihood", "sse"])
def test_cost_table_agrees_with_direct_fits(criterion):
    curves = _random_curves()
    basis = PolyBasis.for_curves(curves, 1)
    weights = np.random.default_rng(1).uniform(0.1, 1.0, size=curves.n_curves)
    table = segment_cost_table(curves, basis, weights, criterion=criterion)
    for a, b in [(0, 2), (0, 12), (3, 9), (10, 12), (5, 7)]:
        direct = weighted_segment_fit(curves, basis, a, b, weights, criterion=criterion)
        assert table.cost(a, b) == pytest.approx(direct.cost, rel=1e-7, abs=1e-9)
    assert np.isinf(table.cost(4, 5))
    assert np.isinf(table.cost(5, 3))


def test_cost_table_entry_count():
    curves = _random_curves(m=10)
    table = segment_cost_table(curves, PolyBasis.for_curves(curves, 1), np.ones(curves.n_curves))
    assert table.n_entries == 45


def test_unit_weight_fit_is_ordinary_least_squares():
    curves = _random_curves(n=4, m=9, seed=5)
    basis = PolyBasis.for_curves(curves, 2)
    fit = weighted_segment_fit(curves, basis, 1, 8, np.ones(4))

    X = np.tile(basis.rows[1:8], (4, 1))
    y = curves.values[:, 1:8].ravel()
    beta, residual, *_ = np.linalg.lstsq(X, y, rcond=None)
    np.testing.assert_allclose(fit.beta, beta, rtol=1e-9, atol=1e-12)
    assert fit.weighted_sse == pytest.approx(residual[0], rel=1e-9)
    assert fit.sigma2 == pytest.approx(residual[0] / (4 * 7), rel=1e-9)
    assert fit.cost == pytest.approx(4 * 7 * (1 + np.log(fit.sigma2)))


def test_noiseless_boundaries_are_recovered():
    spec = noiseless_piecewise_spec(n=4)
    means = spec.mean_curves()
    curves = CurveSet(values=np.repeat(means[:1], 3, axis=0), grid=np.arange(1.0, 161.0))
    model = fit_piecewise(curves, PolyBasis.for_curves(curves, 1), 5, np.ones(3))
    assert model.segmentation.boundaries == (0, 20, 60, 115, 140, 160)
    np.testing.assert_allclose(model.mean_curve(), means[0], atol=1e-6)
    assert model.n_floored == 5


@pytest.mark.parametrize("cluster", [0, 1])
def test_true_boundaries_are_the_only_exact_fit(cluster):
    spec = noiseless_piecewise_spec(n=4)
    means = spec.mean_curves()
    curves = CurveSet(values=np.repeat(means[cluster : cluster + 1], 3, axis=0), grid=np.arange(1.0, 161.0))
    basis = PolyBasis.for_curves(curves, 1)
    boundaries = list(spec.clusters[cluster].boundaries)
    assert fit_segments(curves, basis, Segmentation(tuple(boundaries)), np.ones(3)).n_floored == 5
    for i in range(1, len(boundaries) - 1):
        for step in (-1, 1):
            moved = boundaries.copy()
            moved[i] += step
            model = fit_segments(curves, basis, Segmentation(tuple(moved)), np.ones(3))
            assert model.n_floored < 5, moved


def test_sse_criterion_recovers_the_other_cluster():
    curves = generate(noiseless_piecewise_spec(n=30, seed=2))
    weights = (curves.labels == 1).astype(float)
    model = fit_piecewise(curves, PolyBasis.for_curves(curves, 1), 5, weights, criterion="sse")
    assert model.segmentation.boundaries == (0, 20, 70, 90, 140, 160)


def test_constant_data_hits_the_variance_floor():
    curves = CurveSet(values=np.full((3, 6), 3.0), grid=np.arange(6.0))
    assert variance_floor(curves.values) == pytest.approx(1e-8)
    fit = weighted_segment_fit(curves, PolyBasis.for_curves(curves, 0), 0, 6, np.ones(3))
    assert fit.floored
    assert fit.sigma2 == pytest.approx(1e-8)
    assert fit.beta[0] == pytest.approx(3.0)


def test_uniform_segmentation():
    assert uniform_segmentation(160, 3).boundaries == (0, 53, 106, 160)
    assert uniform_segmentation(7, 1).boundaries == (0, 7)


def test_random_segmentation_respects_min_length():
    rng = np.random.default_rng(0)
    for _ in range(100):
        segmentation = random_segmentation(20, 4, 3, rng)
        assert segmentation.n_points == 20
        assert segmentation.n_segments == 4
        assert segmentation.lengths.min() >= 3


def test_infeasible_segmentations():
    with pytest.raises(InfeasibleSegmentation):
        uniform_segmentation(5, 6)
    with pytest.raises(InfeasibleSegmentation):
        check_feasible(10, 4, 3)
    with pytest.raises(InvalidData):
        check_feasible(10, 0, 1)

    curves = _random_curves(m=8)
    basis = PolyBasis.for_curves(curves, 2)
    with pytest.raises(InfeasibleSegmentation):
        weighted_segment_fit(curves, basis, 0, 2, np.ones(curves.n_curves))
    with pytest.raises(InfeasibleSegmentation):
        fit_piecewise(curves, basis, 3, np.ones(curves.n_curves))
    with pytest.raises(InfeasibleSegmentation):
        fit_segments(curves, basis, Segmentation((0, 2, 8)), np.ones(curves.n_curves))


def test_segmentation_validation():
    with pytest.raises(InvalidData):
        Segmentation((1, 4))
    with pytest.raises(InvalidData):
        Segmentation((0, 3, 3, 6))
    assert Segmentation((0, 2, 5)).segment_index().tolist() == [0, 0, 1, 1, 1]


def test_zero_weights_are_an_empty_cluster():
    curves = _random_curves()
    with pytest.raises(EmptyCluster):
        weighted_segment_fit(curves, PolyBasis.for_curves(curves, 0), 0, 4, np.zeros(curves.n_curves))
    with pytest.raises(InvalidData):
        weighted_segment_fit(curves, PolyBasis.for_curves(curves, 0), 0, 4, -np.ones(curves.n_curves))
