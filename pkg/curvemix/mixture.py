"""EM / CEM engine shared by every curve mixture.

A concrete mixture supplies initialisation, per-cluster log-densities and an M-step
for arbitrary (soft or hard) cluster weights; this module runs the restarts, the
E-step, the optional C-step, the stopping rules and the empty-cluster policy.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp

from curvemix.config import Config, FitConfig
from curvemix.dataset import CurveSet
from curvemix.errors import CurveMixError, EmptyCluster, FitFailed, InvalidData
from curvemix.piecewise import variance_floor

logger = logging.getLogger("curvemix.em")


class ModelKind(str, Enum):
    PWRM_EM = "pwrm-em"
    PWRM_CEM = "pwrm-cem"
    KMEANS = "kmeans"
    PRM_EM = "prm-em"
    PRM_CEM = "prm-cem"
    GMM_EM = "gmm-em"
    GMM_CEM = "gmm-cem"

    @property
    def family(self) -> str:
        return self.value.split("-")[0]

    @property
    def hard(self) -> bool:
        return self in (ModelKind.PWRM_CEM, ModelKind.KMEANS, ModelKind.PRM_CEM, ModelKind.GMM_CEM)


@dataclass(frozen=True)
class HardPartition:
    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= self.n_clusters):
            raise InvalidData(f"partition labels must lie in 0..{self.n_clusters - 1}")
        object.__setattr__(self, "labels", labels)

    @property
    def indicators(self) -> np.ndarray:
        return one_hot(self.labels, self.n_clusters)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    labels: np.ndarray
    segmentations: Optional[Tuple[Tuple[int, ...], ...]] = None
    distortion: Optional[float] = None


@dataclass
class FitResult:
    model_kind: ModelKind
    params: Any
    posteriors: np.ndarray
    labels: np.ndarray
    trace: List[float]
    converged: bool
    n_iter: int
    log_likelihood: float
    complete_log_likelihood: float
    n_curves: int
    n_points: int
    restart: int = 0
    seed: int = 0
    events: List[Tuple[int, str]] = field(default_factory=list)
    history: List[IterationRecord] = field(default_factory=list)
    diagnostics: List[str] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return self.posteriors.shape[1]

    @property
    def score(self) -> float:
        """Final criterion oriented so that larger is better."""
        final = self.trace[-1]
        return -final if self.model_kind is ModelKind.KMEANS else final

    @property
    def partition(self) -> HardPartition:
        return HardPartition(self.labels, self.n_clusters)


def one_hot(labels: Sequence[int], n_clusters: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    indicators = np.zeros((labels.size, n_clusters))
    indicators[np.arange(labels.size), labels] = 1.0
    return indicators


def random_partition(n_curves: int, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random labels with every cluster holding at least one curve."""
    if n_curves < n_clusters:
        raise InvalidData(f"cannot split {n_curves} curves into {n_clusters} clusters")
    labels = rng.integers(n_clusters, size=n_curves)
    labels[rng.permutation(n_curves)[:n_clusters]] = np.arange(n_clusters)
    return labels


def _log_proportions(alpha: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(alpha, dtype=float))


def _posteriors(log_densities: np.ndarray, alpha: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    joint = log_densities + _log_proportions(alpha)
    row_norm = logsumexp(joint, axis=1)
    return np.exp(joint - row_norm[:, None]), row_norm, joint


def e_step(log_densities: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Posterior cluster memberships tau_ik by a log-sum-exp softmax."""
    tau, _, _ = _posteriors(log_densities, alpha)
    return tau


def complete_log_likelihood(log_densities: np.ndarray, alpha: np.ndarray, labels: Sequence[int]) -> float:
    labels = np.asarray(labels, dtype=int)
    rows = np.arange(labels.size)
    return float(np.sum(_log_proportions(alpha)[labels] + log_densities[rows, labels]))


def map_labels(scores: np.ndarray) -> np.ndarray:
    """MAP rule on posteriors or log-posteriors; ties go to the smallest cluster index."""
    return np.argmax(scores, axis=1)


def squared_distances(values: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """n x K matrix of ||y_i - g_k||^2."""
    return np.sum((values[:, None, :] - prototypes[None, :, :]) ** 2, axis=2)


def check_cluster_mass(weights: np.ndarray) -> None:
    mass = weights.sum(axis=0)
    empty = np.flatnonzero(mass < Config.EMPTY_CLUSTER_MASS)
    if empty.size:
        raise EmptyCluster(empty.tolist())


class CurveMixture(ABC):
    """One mixture family bound to a curve set and a fit configuration."""

    kind: ModelKind

    def __init__(self, curves: CurveSet, config: FitConfig):
        if config.init == "labels" and len(config.initial_labels) != curves.n_curves:
            raise InvalidData(
                f"{len(config.initial_labels)} initial labels for {curves.n_curves} curves"
            )
        if config.init == "labels":
            sizes = np.bincount(config.initial_labels, minlength=config.n_clusters)
            if np.any(sizes == 0):
                raise InvalidData(f"initial partition leaves clusters {np.flatnonzero(sizes == 0).tolist()} empty")
        if curves.n_curves < config.n_clusters:
            raise InvalidData(f"cannot split {curves.n_curves} curves into {config.n_clusters} clusters")
        self.curves = curves
        self.config = config
        self.floor = variance_floor(curves.values)

    @property
    def n_clusters(self) -> int:
        return self.config.n_clusters

    @abstractmethod
    def initialize(self, labels: np.ndarray, rng: np.random.Generator, restart: int) -> Any:
        """Parameters computed from an initial hard partition."""

    @abstractmethod
    def log_density(self, params: Any) -> np.ndarray:
        """n x K matrix of log p(y_i | z_i = k)."""

    @abstractmethod
    def m_step(self, weights: np.ndarray) -> Any:
        """Parameters maximising the expected complete-data log-likelihood; raises EmptyCluster."""

    @abstractmethod
    def n_free_parameters(self, params: Any) -> int:
        pass

    @abstractmethod
    def prototypes(self, params: Any) -> np.ndarray:
        """K x m matrix of cluster mean curves."""

    def initial_fit_is_m_step(self) -> bool:
        """Whether ``initialize`` returns exactly the M-step solution for its partition."""
        return True

    def segmentations(self, params: Any) -> Optional[Tuple[Tuple[int, ...], ...]]:
        return None

    def floor_activations(self, params: Any) -> int:
        return 0

    def distortion(self, params: Any, labels: np.ndarray) -> float:
        """Sum of squared distances of the curves to their cluster prototype."""
        sq = squared_distances(self.curves.values, self.prototypes(params))
        return float(sq[np.arange(labels.size), labels].sum())


def _reseed_empty(
    mixture: CurveMixture, weights: np.ndarray, tau: np.ndarray, iteration: int, events: List[Tuple[int, str]]
) -> Tuple[Any, np.ndarray]:
    """M-step that repopulates every empty cluster from the least confidently assigned curve.

    Returns the parameters together with the weights they were fitted on.
    """
    weights = weights.copy()
    taken: List[int] = []
    for _ in range(mixture.n_clusters + 1):
        try:
            return mixture.m_step(weights), weights
        except EmptyCluster as exc:
            confidence = tau.max(axis=1).copy()
            confidence[taken] = np.inf
            for k in exc.clusters:
                i = int(np.argmin(confidence))
                confidence[i] = np.inf
                taken.append(i)
                weights[i] = 0.0
                weights[i, k] = 1.0
                events.append((iteration, f"cluster {k} empty; reseeded from curve {i}"))
                logger.warning("Cluster %d lost all its mass at iteration %d; reseeded from curve %d", k, iteration, i)
    raise FitFailed("empty clusters could not be repopulated")


def initial_partition(mixture: CurveMixture, rng: np.random.Generator) -> np.ndarray:
    config = mixture.config
    if config.init == "labels":
        return np.asarray(config.initial_labels, dtype=int)
    return random_partition(mixture.curves.n_curves, config.n_clusters, rng)


def _single_run(mixture: CurveMixture, hard: bool, restart: int, rng: np.random.Generator) -> FitResult:
    config = mixture.config
    fitted_on = initial_partition(mixture, rng)
    params = mixture.initialize(fitted_on, rng, restart)

    trace: List[float] = []
    events: List[Tuple[int, str]] = []
    history: List[IterationRecord] = []
    # a stable partition only proves convergence once params come from an M-step on it
    settled = mixture.initial_fit_is_m_step()
    converged = False
    iteration = 0
    for iteration in range(config.max_iter + 1):
        log_dens = mixture.log_density(params)
        tau, row_norm, joint = _posteriors(log_dens, params.alpha)
        labels = map_labels(joint)
        log_lik = float(row_norm.sum())
        complete = complete_log_likelihood(log_dens, params.alpha, labels)
        value = complete if hard else log_lik

        if config.record_history:
            recorded = fitted_on if hard else labels
            history.append(
                IterationRecord(
                    iteration=iteration,
                    labels=recorded.copy(),
                    segmentations=mixture.segmentations(params),
                    distortion=mixture.distortion(params, recorded),
                )
            )
        if trace and value < trace[-1] - Config.MONOTONICITY_TOL:
            excused = any(it == iteration - 1 for it, _ in events)
            if not excused:
                logger.warning(
                    "Criterion decreased by %.3e at iteration %d of restart %d",
                    trace[-1] - value, iteration, restart,
                )
        trace.append(value)

        if hard and settled and np.array_equal(labels, fitted_on):
            converged = True
            break
        if (not hard or config.stop_on_criterion) and len(trace) > 1:
            if abs(trace[-1] - trace[-2]) <= config.tol * abs(trace[-2]):
                converged = True
                break
        if iteration == config.max_iter:
            break

        weights = one_hot(labels, mixture.n_clusters) if hard else tau
        params, weights = _reseed_empty(mixture, weights, tau, iteration, events)
        fitted_on = map_labels(weights)
        settled = True
        floored = mixture.floor_activations(params)
        if floored:
            events.append((iteration, f"variance floor active on {floored} segments"))
            logger.warning("Variance floor active on %d segments after M-step %d", floored, iteration)

    if not converged:
        logger.warning("Restart %d stopped at max_iter=%d without converging", restart, config.max_iter)
    return FitResult(
        model_kind=mixture.kind,
        params=params,
        posteriors=tau,
        labels=labels,
        trace=trace,
        converged=converged,
        n_iter=iteration,
        log_likelihood=log_lik,
        complete_log_likelihood=complete,
        n_curves=mixture.curves.n_curves,
        n_points=mixture.curves.n_points,
        restart=restart,
        seed=config.seed,
        events=events,
        history=history,
    )


def _guarded_run(run, mixture, restart: int, seed: np.random.SeedSequence) -> Union[FitResult, str]:
    rng = np.random.default_rng(seed)
    try:
        result = run(mixture, restart, rng)
    except (CurveMixError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.warning("Restart %d failed: %s", restart, exc)
        return f"restart {restart}: {exc}"
    logger.info(
        "Restart %d finished after %d iterations (converged=%s, criterion=%.6f)",
        restart, result.n_iter, result.converged, result.trace[-1],
    )
    return result


def select_best(results: Sequence[FitResult]) -> FitResult:
    """Highest score; near-ties go to the fewest iterations, then the earliest restart."""
    top = max(result.score for result in results)
    contenders = [result for result in results if result.score >= top - Config.RESTART_TIE_TOL]
    return min(contenders, key=lambda result: (result.n_iter, result.restart))


def run_restarts(run, mixture: CurveMixture) -> FitResult:
    """Independent restarts of ``run(mixture, restart, rng)``, each with its own child seed."""
    config = mixture.config
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_restarts)
    logger.info("Fitting %s with %d restarts on %d curves", mixture.kind.value, config.n_restarts, mixture.curves.n_curves)
    outcomes = Parallel(n_jobs=config.n_jobs, prefer="threads")(
        delayed(_guarded_run)(run, mixture, restart, seed) for restart, seed in enumerate(seeds)
    )
    successes = [outcome for outcome in outcomes if isinstance(outcome, FitResult)]
    failures = [outcome for outcome in outcomes if isinstance(outcome, str)]
    if not successes:
        logger.error("All %d restarts of %s failed", config.n_restarts, mixture.kind.value)
        raise FitFailed(f"all {config.n_restarts} restarts failed", failures)
    best = select_best(successes)
    best.diagnostics = failures
    return best


def run_em(mixture: CurveMixture, hard: bool = False) -> FitResult:
    """EM (``hard=False``) or CEM (``hard=True``) with the configured restarts."""
    return run_restarts(lambda m, restart, rng: _single_run(m, hard, restart, rng), mixture)
