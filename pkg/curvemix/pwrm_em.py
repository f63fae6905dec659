"""Piecewise regression mixture fitted by EM.

Each cluster is a piecewise polynomial model with its own transition points; the
M-step re-segments every cluster with the weighted dynamic program.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from curvemix.config import FitConfig
from curvemix.dataset import CurveSet
from curvemix.errors import InvalidData
from curvemix.mixture import (
    CurveMixture,
    FitResult,
    ModelKind,
    check_cluster_mass,
    e_step,
    one_hot,
    run_em,
    squared_distances,
)
from curvemix.piecewise import (
    PiecewiseModel,
    PolyBasis,
    check_feasible,
    fit_piecewise,
    fit_segments,
    random_segmentation,
    uniform_segmentation,
)

__all__ = ["PwrmParams", "PwrmMixture", "log_density_per_cluster", "e_step", "m_step", "fit_em"]

logger = logging.getLogger("curvemix.pwrm")

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PwrmParams:
    alpha: np.ndarray
    clusters: Tuple[PiecewiseModel, ...]
    degree: int
    pooled_variance: bool = False
    fixed_proportions: bool = False

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.shape != (len(self.clusters),):
            raise InvalidData(f"{alpha.size} proportions for {len(self.clusters)} clusters")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-12:
            raise InvalidData(f"mixing proportions must lie on the simplex: {alpha}")
        object.__setattr__(self, "alpha", alpha)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_regimes(self) -> List[int]:
        return [model.n_segments for model in self.clusters]

    def n_free_parameters(self) -> int:
        # coefficients and transition points, then variances and proportions
        count = sum(r * (self.degree + 1) + (r - 1) for r in self.n_regimes)
        count += 1 if self.pooled_variance else sum(self.n_regimes)
        if not self.fixed_proportions:
            count += self.n_clusters - 1
        return count

    def means(self) -> np.ndarray:
        return np.vstack([model.mean_curve() for model in self.clusters])

    def variances(self) -> np.ndarray:
        return np.vstack([model.variance_curve() for model in self.clusters])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alpha": self.alpha.tolist(),
            "degree": self.degree,
            "pooled_variance": self.pooled_variance,
            "clusters": [model.to_dict() for model in self.clusters],
        }


def log_density_per_cluster(curves: CurveSet, params: PwrmParams) -> np.ndarray:
    """n x K matrix of sum_j log N(y_ij; mean_kj, var_kj)."""
    means = params.means()
    variances = params.variances()
    if means.shape[1] != curves.n_points:
        raise InvalidData(f"parameters cover {means.shape[1]} points, curves have {curves.n_points}")
    if params.pooled_variance:
        sigma2 = float(variances[0, 0])
        sq = squared_distances(curves.values, means)
        return -0.5 * curves.n_points * (LOG_2PI + np.log(sigma2)) - sq / (2.0 * sigma2)
    residuals = curves.values[:, None, :] - means[None, :, :]
    normaliser = -0.5 * np.sum(LOG_2PI + np.log(variances), axis=1)
    return normaliser[None, :] - 0.5 * np.sum(residuals**2 / variances[None, :, :], axis=2)


class PwrmMixture(CurveMixture):
    def __init__(self, curves: CurveSet, config: FitConfig):
        super().__init__(curves, config)
        self.kind = ModelKind.PWRM_CEM if config.classification else ModelKind.PWRM_EM
        self.basis = PolyBasis.for_curves(curves, config.degree)
        self.regimes = config.regimes_per_cluster()
        for n_regimes in self.regimes:
            check_feasible(curves.n_points, n_regimes, self.basis.min_segment_length)
        self.criterion = "sse" if config.pooled_variance else "likelihood"

    def _proportions(self, weights: np.ndarray) -> np.ndarray:
        if self.config.fixed_proportions:
            return np.full(self.n_clusters, 1.0 / self.n_clusters)
        alpha = weights.sum(axis=0) / self.curves.n_curves
        return alpha / alpha.sum()

    def _assemble(self, weights: np.ndarray, models: Sequence[PiecewiseModel]) -> PwrmParams:
        models = list(models)
        if self.config.pooled_variance:
            sse = sum(fit.weighted_sse for model in models for fit in model.fits)
            sigma2 = max(sse / (weights.sum() * self.curves.n_points), self.floor)
            models = [model.with_variance(sigma2) for model in models]
        return PwrmParams(
            alpha=self._proportions(weights),
            clusters=tuple(models),
            degree=self.config.degree,
            pooled_variance=self.config.pooled_variance,
            fixed_proportions=self.config.fixed_proportions,
        )

    def initialize(self, labels: np.ndarray, rng: np.random.Generator, restart: int) -> PwrmParams:
        weights = one_hot(labels, self.n_clusters)
        mode = self.config.segmentation_init
        if mode == "optimal":
            return self.m_step(weights)
        check_cluster_mass(weights)
        m, min_length = self.curves.n_points, self.basis.min_segment_length
        models = []
        for k, n_regimes in enumerate(self.regimes):
            if mode == "uniform" or restart == 0:
                segmentation = uniform_segmentation(m, n_regimes, min_length)
            else:
                segmentation = random_segmentation(m, n_regimes, min_length, rng)
            models.append(
                fit_segments(self.curves, self.basis, segmentation, weights[:, k], self.floor, self.criterion)
            )
        return self._assemble(weights, models)

    def initial_fit_is_m_step(self) -> bool:
        return self.config.segmentation_init == "optimal"

    def log_density(self, params: PwrmParams) -> np.ndarray:
        return log_density_per_cluster(self.curves, params)

    def m_step(self, weights: np.ndarray) -> PwrmParams:
        check_cluster_mass(weights)
        models = [
            fit_piecewise(self.curves, self.basis, n_regimes, weights[:, k], self.floor, self.criterion)
            for k, n_regimes in enumerate(self.regimes)
        ]
        return self._assemble(weights, models)

    def n_free_parameters(self, params: PwrmParams) -> int:
        return params.n_free_parameters()

    def prototypes(self, params: PwrmParams) -> np.ndarray:
        return params.means()

    def segmentations(self, params: PwrmParams) -> Tuple[Tuple[int, ...], ...]:
        return tuple(model.segmentation.boundaries for model in params.clusters)

    def floor_activations(self, params: PwrmParams) -> int:
        if params.pooled_variance:
            return 0
        return sum(model.n_floored for model in params.clusters)


def m_step(curves: CurveSet, tau: np.ndarray, config: FitConfig) -> PwrmParams:
    """One M-step from posterior (or hard) memberships; raises EmptyCluster."""
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (curves.n_curves, config.n_clusters):
        raise InvalidData(f"posterior matrix has shape {tau.shape}, expected {(curves.n_curves, config.n_clusters)}")
    return PwrmMixture(curves, config).m_step(tau)


def fit_em(curves: CurveSet, config: Optional[FitConfig] = None) -> FitResult:
    config = config or FitConfig()
    if config.classification:
        config = config.model_copy(update={"classification": False})
    mixture = PwrmMixture(curves, config)
    result = run_em(mixture, hard=False)
    logger.info(
        "PWRM-EM K=%d R=%s p=%d: log-likelihood %.4f after %d iterations (restart %d)",
        config.n_clusters, mixture.regimes, config.degree, result.log_likelihood, result.n_iter, result.restart,
    )
    return result
