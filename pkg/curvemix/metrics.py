"""Clustering quality: misclassification under the best label matching and intra-cluster inertia."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import confusion_matrix

from curvemix.config import Config, FitConfig
from curvemix.dataset import CurveSet, generate, table1_spec
from curvemix.errors import CurveMixError, InvalidData
from curvemix.mixture import FitResult, ModelKind, squared_distances
from curvemix.piecewise import PolyBasis
from curvemix.selection import fit_model

logger = logging.getLogger("curvemix.metrics")


def _as_labels(labels: Sequence[int], name: str) -> np.ndarray:
    array = np.asarray(labels)
    if array.ndim != 1 or (array.size and not np.issubdtype(array.dtype, np.integer)):
        raise InvalidData(f"{name} must be a 1-d integer array")
    if np.any(array < 0):
        raise InvalidData(f"{name} contains negative labels")
    return array.astype(int)


def misclassification(
    true_labels: Sequence[int], est_labels: Sequence[int], n_clusters: Optional[int] = None
) -> Tuple[float, Dict[int, int]]:
    """Smallest error rate over one-to-one matchings of estimated to true clusters.

    Returns the rate and the matching as ``{estimated: true}``.
    """
    truth = _as_labels(true_labels, "true labels")
    estimate = _as_labels(est_labels, "estimated labels")
    if truth.size != estimate.size:
        raise InvalidData(f"{truth.size} true labels against {estimate.size} estimated labels")
    if truth.size == 0:
        raise InvalidData("cannot score an empty labelling")
    observed = int(max(truth.max(), estimate.max())) + 1
    K = observed if n_clusters is None else n_clusters
    if observed > K:
        raise InvalidData(f"labels reach {observed - 1}, outside 0..{K - 1}")

    confusion = confusion_matrix(estimate, truth, labels=np.arange(K))
    if K <= Config.EXHAUSTIVE_PERMUTATION_MAX_K:
        permutations = np.array(list(itertools.permutations(range(K))))
        agreement = confusion[np.arange(K), permutations].sum(axis=1)
        best = permutations[int(np.argmax(agreement))]
    else:
        _, best = linear_sum_assignment(confusion, maximize=True)
    matched = int(confusion[np.arange(K), best].sum())
    return 1.0 - matched / truth.size, {int(k): int(best[k]) for k in range(K)}


def prototypes(curves: CurveSet, fit: FitResult) -> np.ndarray:
    """K x m prototype curves the way each family defines its cluster representative.

    Piecewise families predict with their segment polynomials, PRM with its single
    polynomial, and GMM uses the mean of the curves assigned to each cluster.
    """
    family = fit.model_kind.family
    params = fit.params
    if family == "pwrm":
        return params.means()
    if family == "kmeans":
        return params.prototypes()
    if family == "prm":
        return params.beta @ PolyBasis.for_curves(curves, params.degree).rows.T
    protos = params.means.copy()
    for k in range(fit.n_clusters):
        members = fit.labels == k
        if members.any():
            protos[k] = curves.values[members].mean(axis=0)
        else:
            logger.warning("Cluster %d has no curves; keeping its posterior-weighted mean", k)
    return protos


def inertia(values: np.ndarray, labels: Sequence[int], protos: np.ndarray) -> float:
    """Sum over curves of the squared distance to their cluster prototype."""
    labels = np.asarray(labels, dtype=int)
    empty = np.setdiff1d(np.arange(protos.shape[0]), labels)
    if empty.size:
        logger.warning("Clusters %s have no curves and contribute nothing to the inertia", empty.tolist())
    sq = squared_distances(values, protos)
    return float(sq[np.arange(labels.size), labels].sum())


def intra_inertia(curves: CurveSet, fit: FitResult, model_kind: Optional[str] = None) -> float:
    if model_kind is not None and ModelKind(model_kind) is not fit.model_kind:
        raise InvalidData(f"fit is a {fit.model_kind.value} result, not {model_kind}")
    return inertia(curves.values, fit.labels, prototypes(curves, fit))


@dataclass
class EvalReport:
    misclassification_rate: float
    intra_cluster_inertia: float
    label_matching: Dict[int, int]
    n_curves: int
    model_kind: Optional[str] = None

    def to_frame(self) -> pd.DataFrame:
        matching = " ".join(f"{k + 1}->{v + 1}" for k, v in sorted(self.label_matching.items()))
        return pd.DataFrame(
            [
                {
                    "model": self.model_kind or "",
                    "n_curves": self.n_curves,
                    "misclassification_rate": self.misclassification_rate,
                    "intra_cluster_inertia": self.intra_cluster_inertia,
                    "label_matching": matching,
                }
            ]
        )


def evaluate_labels(
    values: np.ndarray,
    true_labels: Sequence[int],
    est_labels: Sequence[int],
    protos: np.ndarray,
    model_kind: Optional[str] = None,
) -> EvalReport:
    n_clusters = max(protos.shape[0], int(np.max(true_labels)) + 1)
    rate, matching = misclassification(true_labels, est_labels, n_clusters=n_clusters)
    return EvalReport(
        misclassification_rate=rate,
        intra_cluster_inertia=inertia(values, est_labels, protos),
        label_matching=matching,
        n_curves=len(est_labels),
        model_kind=model_kind,
    )


def evaluate(curves: CurveSet, fit: FitResult, true_labels: Optional[Sequence[int]] = None) -> EvalReport:
    truth = curves.labels if true_labels is None else true_labels
    if truth is None:
        raise InvalidData("evaluation needs true labels")
    return evaluate_labels(curves.values, truth, fit.labels, prototypes(curves, fit), fit.model_kind.value)


@dataclass(frozen=True)
class SweepSettings:
    shifts: Tuple[float, ...] = (0.0, 0.5, 1.0, 1.5)
    n_datasets: int = 10
    algorithms: Tuple[str, ...] = ("pwrm-em", "pwrm-cem", "kmeans", "prm-em", "gmm-em")
    n_clusters: int = 2
    n_regimes: int = 5
    degree: int = 1
    prm_degree: int = 10
    unbalanced: bool = False
    n_curves: int = 100
    seed: int = 0
    base: FitConfig = field(default_factory=FitConfig)

    def config_for(self, algorithm: str) -> FitConfig:
        family = ModelKind(algorithm).family
        regimes, degree = self.n_regimes, self.degree
        if family == "kmeans":
            degree = 0
        elif family == "prm":
            regimes, degree = 1, self.prm_degree
        elif family == "gmm":
            regimes, degree = 1, 0
        return self.base.model_copy(
            update={"n_clusters": self.n_clusters, "n_regimes": regimes, "degree": degree, "seed": self.seed}
        )


def noise_sweep(settings: SweepSettings) -> pd.DataFrame:
    """Misclassification and inertia of every algorithm on fresh datasets at each noise shift."""
    rows: List[Dict] = []
    for shift in settings.shifts:
        for d in range(settings.n_datasets):
            spec = table1_spec(
                noise_shift=shift, unbalanced=settings.unbalanced, n=settings.n_curves, seed=settings.seed + d
            )
            curves = generate(spec)
            for algorithm in settings.algorithms:
                row = {"shift": shift, "dataset": d, "algorithm": algorithm}
                try:
                    fit = fit_model(curves, algorithm, settings.config_for(algorithm))
                    report = evaluate(curves, fit)
                    row.update(
                        misclassification=report.misclassification_rate,
                        inertia=report.intra_cluster_inertia,
                        status="ok",
                    )
                except CurveMixError as exc:
                    logger.warning("Sweep shift=%s dataset=%d %s failed: %s", shift, d, algorithm, exc)
                    row.update(misclassification=np.nan, inertia=np.nan, status="failed")
                rows.append(row)
            logger.info("Sweep shift=%s dataset %d/%d done", shift, d + 1, settings.n_datasets)
    return pd.DataFrame(rows, columns=["shift", "dataset", "algorithm", "misclassification", "inertia", "status"])


def summarize_sweep(frame: pd.DataFrame, reference: Optional[str] = None) -> pd.DataFrame:
    """Mean error per shift and algorithm, plus how often ``reference`` does no worse."""
    algorithms = list(dict.fromkeys(frame["algorithm"]))
    if reference is None:
        reference = next((a for a in algorithms if a.startswith("pwrm")), algorithms[0])
    summary = (
        frame.groupby(["shift", "algorithm"], sort=False)
        .agg(mean_misclassification=("misclassification", "mean"), mean_inertia=("inertia", "mean"))
        .reset_index()
    )
    wide = frame.pivot_table(index=["shift", "dataset"], columns="algorithm", values="misclassification")
    no_worse = {}
    for algorithm in algorithms:
        if algorithm in wide:
            hits = (wide[reference] <= wide[algorithm]).groupby(level="shift").mean()
            for shift, share in hits.items():
                no_worse[(shift, algorithm)] = float(share)
    summary[f"{reference}_no_worse"] = [
        no_worse.get((shift, algorithm), np.nan) for shift, algorithm in zip(summary["shift"], summary["algorithm"])
    ]
    return summary
