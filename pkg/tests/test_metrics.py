import logging

import numpy as np
import pandas as pd
import pytest

from conftest import quick_config
from curvemix.dataset import CurveSet
from curvemix.errors import InvalidData
from curvemix.metrics import (
    SweepSettings,
    evaluate,
    inertia,
    intra_inertia,
    misclassification,
    noise_sweep,
    summarize_sweep,
)
from curvemix.pwrm_em import fit_em


def test_perfect_and_swapped_labellings():
    truth = [0, 0, 1, 1, 1]
    assert misclassification(truth, truth) == (0.0, {0: 0, 1: 1})
    rate, matching = misclassification(truth, [1, 1, 0, 0, 0])
    assert rate == 0.0
    assert matching == {0: 1, 1: 0}


def test_three_errors_in_ten_curves():
    truth = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2]
    # clusters renamed 0->2, 1->0, 2->1, then three curves moved
    estimate = [2, 2, 0, 0, 0, 1, 1, 1, 1, 0]
    rate, matching = misclassification(truth, estimate)
    assert rate == pytest.approx(0.3)
    assert matching == {2: 0, 0: 1, 1: 2}


def test_bad_labellings_are_rejected():
    with pytest.raises(InvalidData):
        misclassification([0, 1], [0, 1, 1])
    with pytest.raises(InvalidData):
        misclassification([], [])
    with pytest.raises(InvalidData):
        misclassification([0, -1], [0, 0])
    with pytest.raises(InvalidData):
        misclassification([0, 3], [0, 1], n_clusters=2)


def test_many_clusters_use_the_assignment_solver():
    rng = np.random.default_rng(0)
    truth = np.repeat(np.arange(10), 5)
    renaming = rng.permutation(10)
    estimate = renaming[truth]
    estimate[:4] = renaming[(truth[:4] + 1) % 10]
    rate, matching = misclassification(truth, estimate)
    assert rate == pytest.approx(4 / 50)
    assert all(matching[renaming[k]] == k for k in range(10))


def test_inertia_of_a_constant_offset():
    protos = np.zeros((2, 6))
    values = np.full((3, 6), 0.5)
    assert inertia(values, [0, 1, 0], protos) == pytest.approx(3 * 6 * 0.25)


def test_empty_clusters_are_reported(caplog):
    with caplog.at_level(logging.WARNING, logger="curvemix.metrics"):
        inertia(np.zeros((2, 3)), [0, 0], np.zeros((3, 3)))
    assert "no curves" in caplog.text


def test_evaluate_a_fit(separable):
    fit = fit_em(separable, quick_config(n_clusters=2, n_regimes=1, degree=0))
    report = evaluate(separable, fit)
    assert report.misclassification_rate == 0.0
    expected = sum(
        np.sum((separable.values[fit.labels == k] - separable.values[fit.labels == k].mean(axis=0).mean()) ** 2)
        for k in range(2)
    )
    assert report.intra_cluster_inertia == pytest.approx(expected, rel=1e-9)
    assert intra_inertia(separable, fit, "pwrm-em") == pytest.approx(report.intra_cluster_inertia)
    with pytest.raises(InvalidData):
        intra_inertia(separable, fit, "kmeans")

    frame = report.to_frame()
    assert frame.loc[0, "model"] == "pwrm-em"
    assert frame.loc[0, "n_curves"] == separable.n_curves


def test_evaluate_needs_labels(separable):
    fit = fit_em(separable, quick_config(n_clusters=2, n_regimes=1, degree=0))
    with pytest.raises(InvalidData):
        evaluate(CurveSet(values=separable.values, grid=separable.grid), fit)


def test_sweep_settings_adapt_each_family():
    settings = SweepSettings(n_regimes=4, degree=2, prm_degree=6, seed=3)
    assert settings.config_for("kmeans").degree == 0
    prm = settings.config_for("prm-em")
    assert (prm.n_regimes, prm.degree) == (1, 6)
    gmm = settings.config_for("gmm-em")
    assert (gmm.n_regimes, gmm.degree) == (1, 0)
    pwrm = settings.config_for("pwrm-cem")
    assert (pwrm.n_regimes, pwrm.degree, pwrm.seed) == (4, 2, 3)


def test_small_noise_sweep():
    settings = SweepSettings(
        shifts=(0.0,),
        n_datasets=1,
        algorithms=("pwrm-cem", "gmm-em"),
        n_curves=20,
        base=quick_config(n_restarts=1, max_iter=20),
    )
    frame = noise_sweep(settings)
    assert list(frame.columns) == ["shift", "dataset", "algorithm", "misclassification", "inertia", "status"]
    assert len(frame) == 2
    assert set(frame["status"]) <= {"ok", "failed"}


def test_summary_compares_against_the_reference():
    frame = pd.DataFrame(
        {
            "shift": [0.0] * 4 + [1.0] * 4,
            "dataset": [0, 0, 1, 1] * 2,
            "algorithm": ["pwrm-em", "kmeans"] * 4,
            "misclassification": [0.0, 0.1, 0.2, 0.1, 0.1, 0.3, 0.0, 0.0],
            "inertia": [1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0],
            "status": ["ok"] * 8,
        }
    )
    summary = summarize_sweep(frame)
    row = summary[(summary["shift"] == 0.0) & (summary["algorithm"] == "kmeans")].iloc[0]
    assert row["mean_misclassification"] == pytest.approx(0.1)
    assert row["pwrm-em_no_worse"] == pytest.approx(0.5)
    row = summary[(summary["shift"] == 1.0) & (summary["algorithm"] == "kmeans")].iloc[0]
    assert row["pwrm-em_no_worse"] == pytest.approx(1.0)
    assert row["mean_inertia"] == pytest.approx(4.0)
