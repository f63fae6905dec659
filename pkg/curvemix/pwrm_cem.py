"""Hard clustering of curves: CEM for the piecewise regression mixture and the
K-means-like alternation between piecewise constant prototypes and nearest-prototype
assignment.

Under identical proportions and a single pooled variance, CEM with p=0 and the
K-means-like algorithm walk through the same partitions; ``check_prop1_equivalence``
runs both and compares them iteration by iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from curvemix.config import Config, FitConfig
from curvemix.dataset import CurveSet
from curvemix.errors import EquivalenceViolation, FitFailed, InvalidData
from curvemix.mixture import (
    CurveMixture,
    FitResult,
    HardPartition,
    IterationRecord,
    ModelKind,
    check_cluster_mass,
    initial_partition,
    map_labels,
    one_hot,
    random_partition,
    run_em,
    run_restarts,
    squared_distances,
)
from curvemix.piecewise import PiecewiseModel, PolyBasis, check_feasible, fit_piecewise
from curvemix.pwrm_em import PwrmMixture

__all__ = [
    "HardPartition",
    "KMeansLikeModel",
    "EquivalenceReport",
    "fit_cem",
    "fit_constrained_cem",
    "fit_kmeans_like",
    "check_prop1_equivalence",
]

logger = logging.getLogger("curvemix.cem")


def fit_cem(curves: CurveSet, config: Optional[FitConfig] = None) -> FitResult:
    """CEM: E-step, MAP classification, M-step on the hard indicators."""
    config = (config or FitConfig()).model_copy(update={"classification": True})
    mixture = PwrmMixture(curves, config)
    result = run_em(mixture, hard=True)
    logger.info(
        "PWRM-CEM K=%d R=%s p=%d: complete log-likelihood %.4f after %d iterations (restart %d)",
        config.n_clusters, mixture.regimes, config.degree, result.complete_log_likelihood, result.n_iter, result.restart,
    )
    return result


def fit_constrained_cem(curves: CurveSet, config: Optional[FitConfig] = None) -> FitResult:
    """CEM with one pooled variance and proportions fixed to 1/K."""
    config = (config or FitConfig()).model_copy(update={"pooled_variance": True, "fixed_proportions": True})
    return fit_cem(curves, config)


@dataclass(frozen=True)
class KMeansLikeModel:
    clusters: Tuple[PiecewiseModel, ...]

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_regimes(self) -> List[int]:
        return [model.n_segments for model in self.clusters]

    @property
    def segment_means(self) -> List[np.ndarray]:
        return [np.array([fit.beta[0] for fit in model.fits]) for model in self.clusters]

    def n_free_parameters(self) -> int:
        # segment means and transition points; no variances or proportions
        return sum(2 * r for r in self.n_regimes) - self.n_clusters

    def prototypes(self) -> np.ndarray:
        return np.vstack([model.mean_curve() for model in self.clusters])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "clusters": [
                {
                    "boundaries": list(model.segmentation.boundaries),
                    "means": means.tolist(),
                    "sse": float(sum(fit.weighted_sse for fit in model.fits)),
                }
                for model, means in zip(self.clusters, self.segment_means)
            ]
        }


class KMeansLike(CurveMixture):
    """Piecewise constant prototypes, relocated by the SSE dynamic program."""

    kind = ModelKind.KMEANS

    def __init__(self, curves: CurveSet, config: FitConfig):
        if config.degree != 0:
            raise InvalidData("kmeans requires p=0")
        super().__init__(curves, config)
        self.basis = PolyBasis.for_curves(curves, 0)
        self.regimes = config.regimes_per_cluster()
        for n_regimes in self.regimes:
            check_feasible(curves.n_points, n_regimes, 1)

    def relocate(self, labels: np.ndarray) -> KMeansLikeModel:
        weights = one_hot(labels, self.n_clusters)
        check_cluster_mass(weights)
        return KMeansLikeModel(
            clusters=tuple(
                fit_piecewise(self.curves, self.basis, n_regimes, weights[:, k], self.floor, "sse")
                for k, n_regimes in enumerate(self.regimes)
            )
        )

    def initialize(self, labels: np.ndarray, rng: np.random.Generator, restart: int) -> KMeansLikeModel:
        return self.relocate(labels)

    def log_density(self, params: KMeansLikeModel) -> np.ndarray:
        return -0.5 * squared_distances(self.curves.values, params.prototypes())

    def m_step(self, weights: np.ndarray) -> KMeansLikeModel:
        return self.relocate(map_labels(weights))

    def n_free_parameters(self, params: KMeansLikeModel) -> int:
        return params.n_free_parameters()

    def prototypes(self, params: KMeansLikeModel) -> np.ndarray:
        return params.prototypes()

    def segmentations(self, params: KMeansLikeModel) -> Tuple[Tuple[int, ...], ...]:
        return tuple(model.segmentation.boundaries for model in params.clusters)

    def repopulate(
        self, labels: np.ndarray, sq: np.ndarray, iteration: int, events: List[Tuple[int, str]]
    ) -> np.ndarray:
        """Moves the curve farthest from its prototype into each empty cluster."""
        labels = labels.copy()
        rows = np.arange(labels.size)
        taken: List[int] = []
        for _ in range(self.n_clusters + 1):
            empty = np.flatnonzero(np.bincount(labels, minlength=self.n_clusters) == 0)
            if not empty.size:
                return labels
            spread = sq[rows, labels].astype(float)
            spread[taken] = -np.inf
            for k in empty:
                i = int(np.argmax(spread))
                spread[i] = -np.inf
                taken.append(i)
                labels[i] = k
                events.append((iteration, f"cluster {k} empty; reseeded from curve {i}"))
                logger.warning("Cluster %d emptied at iteration %d; reseeded from curve %d", k, iteration, i)
        raise FitFailed("empty clusters could not be repopulated")


def _kmeans_run(km: KMeansLike, restart: int, rng: np.random.Generator) -> FitResult:
    config = km.config
    values = km.curves.values
    rows = np.arange(km.curves.n_curves)
    labels = initial_partition(km, rng)
    model = km.initialize(labels, rng, restart)

    trace: List[float] = []
    events: List[Tuple[int, str]] = []
    history: List[IterationRecord] = []
    converged = False
    iteration = 0
    for iteration in range(config.max_iter + 1):
        sq = squared_distances(values, model.prototypes())
        energy = float(sq[rows, labels].sum())
        if config.record_history:
            history.append(IterationRecord(iteration, labels.copy(), km.segmentations(model), energy))
        if trace and energy > trace[-1] + Config.MONOTONICITY_TOL * max(1.0, abs(trace[-1])):
            if not any(it == iteration - 1 for it, _ in events):
                logger.warning("Distortion increased by %.3e at iteration %d", energy - trace[-1], iteration)
        trace.append(energy)

        assigned = np.argmin(sq, axis=1)
        if np.array_equal(assigned, labels):
            converged = True
            break
        if config.stop_on_criterion and len(trace) > 1:
            if abs(trace[-1] - trace[-2]) <= config.tol * abs(trace[-2]):
                converged = True
                break
        if iteration == config.max_iter:
            break
        labels = km.repopulate(assigned, sq, iteration, events)
        model = km.relocate(labels)

    if not converged:
        logger.warning("K-means-like restart %d stopped at max_iter=%d", restart, config.max_iter)
    return FitResult(
        model_kind=ModelKind.KMEANS,
        params=model,
        posteriors=one_hot(assigned, km.n_clusters),
        labels=assigned,
        trace=trace,
        converged=converged,
        n_iter=iteration,
        log_likelihood=-trace[-1] / 2.0,
        complete_log_likelihood=-trace[-1] / 2.0,
        n_curves=km.curves.n_curves,
        n_points=km.curves.n_points,
        restart=restart,
        seed=config.seed,
        events=events,
        history=history,
    )


def fit_kmeans_like(curves: CurveSet, config: Optional[FitConfig] = None) -> FitResult:
    """K-means-like clustering; ``trace`` holds the distortion E, ``partition`` the labels."""
    config = config or FitConfig(degree=0)
    km = KMeansLike(curves, config)
    result = run_restarts(_kmeans_run, km)
    logger.info(
        "K-means-like K=%d R=%s: distortion %.4f after %d iterations (restart %d)",
        config.n_clusters, km.regimes, result.trace[-1], result.n_iter, result.restart,
    )
    return result


@dataclass
class EquivalenceReport:
    n_iterations: int
    partitions: List[np.ndarray]
    segmentations: List[Tuple[Tuple[int, ...], ...]]
    cem_distortion: List[float]
    kmeans_distortion: List[float]
    complete_log_likelihood: List[float]
    cem: FitResult
    kmeans: FitResult


def check_prop1_equivalence(
    curves: CurveSet, config: Optional[FitConfig] = None, seed: Optional[int] = None
) -> EquivalenceReport:
    """Runs constrained CEM and K-means-like from one partition; raises on the first divergence."""
    config = config or FitConfig(degree=0)
    if config.degree != 0:
        raise InvalidData("the CEM / K-means-like equivalence requires p=0")
    seed = config.seed if seed is None else seed
    if config.init == "labels":
        start = list(config.initial_labels)
    else:
        start = random_partition(curves.n_curves, config.n_clusters, np.random.default_rng(seed)).tolist()
    shared = config.model_copy(
        update={
            "seed": seed,
            "init": "labels",
            "initial_labels": start,
            "n_restarts": 1,
            "record_history": True,
            "stop_on_criterion": False,
        }
    )
    cem = fit_constrained_cem(curves, shared.model_copy(update={"segmentation_init": "optimal"}))
    kmeans = fit_kmeans_like(curves, shared)

    for q in range(max(len(cem.history), len(kmeans.history))):
        if q >= len(cem.history) or q >= len(kmeans.history):
            raise EquivalenceViolation(q, "one algorithm stopped before the other")
        left, right = cem.history[q], kmeans.history[q]
        moved = np.flatnonzero(left.labels != right.labels)
        if moved.size:
            raise EquivalenceViolation(q, f"partitions differ on curves {moved.tolist()}")
        if left.segmentations != right.segmentations:
            raise EquivalenceViolation(q, f"segmentations differ: {left.segmentations} vs {right.segmentations}")
        if left.distortion != right.distortion:
            raise EquivalenceViolation(q, f"distortion {left.distortion!r} vs {right.distortion!r}")
    if not np.array_equal(cem.labels, kmeans.labels):
        raise EquivalenceViolation(len(cem.history), "final partitions differ")

    logger.info("Equivalence held over %d iterations (seed %d)", len(cem.history), seed)
    return EquivalenceReport(
        n_iterations=len(cem.history),
        partitions=[record.labels for record in cem.history],
        segmentations=[record.segmentations for record in cem.history],
        cem_distortion=[record.distortion for record in cem.history],
        kmeans_distortion=[record.distortion for record in kmeans.history],
        complete_log_likelihood=list(cem.trace),
        cem=cem,
        kmeans=kmeans,
    )
