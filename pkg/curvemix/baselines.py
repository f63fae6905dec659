"""Reference mixtures: polynomial regression mixture (PRM) and Gaussian mixture on the raw curve vectors."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from curvemix.config import FitConfig
from curvemix.dataset import CurveSet
from curvemix.errors import InvalidData
from curvemix.mixture import (
    CurveMixture,
    FitResult,
    ModelKind,
    check_cluster_mass,
    one_hot,
    run_em,
    squared_distances,
)
from curvemix.piecewise import PolyBasis, SegmentFit, check_feasible, weighted_segment_fit

logger = logging.getLogger("curvemix.baselines")

LOG_2PI = float(np.log(2.0 * np.pi))


def _simplex(weights: np.ndarray) -> np.ndarray:
    alpha = weights.sum(axis=0) / weights.shape[0]
    return alpha / alpha.sum()


@dataclass(frozen=True)
class PrmParams:
    alpha: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    degree: int
    n_floored: int = 0

    @property
    def n_clusters(self) -> int:
        return self.alpha.size

    def n_free_parameters(self) -> int:
        return self.n_clusters * (self.degree + 3) - 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alpha": self.alpha.tolist(),
            "degree": self.degree,
            "beta": self.beta.tolist(),
            "sigma2": self.sigma2.tolist(),
        }


class PrmMixture(CurveMixture):
    """One polynomial of degree p over the whole grid per cluster."""

    def __init__(self, curves: CurveSet, config: FitConfig):
        super().__init__(curves, config)
        self.kind = ModelKind.PRM_CEM if config.classification else ModelKind.PRM_EM
        self.basis = PolyBasis.for_curves(curves, config.degree)
        check_feasible(curves.n_points, 1, self.basis.min_segment_length)

    def initialize(self, labels: np.ndarray, rng: np.random.Generator, restart: int) -> PrmParams:
        return self.m_step(one_hot(labels, self.n_clusters))

    def m_step(self, weights: np.ndarray) -> PrmParams:
        check_cluster_mass(weights)
        m = self.curves.n_points
        fits: Tuple[SegmentFit, ...] = tuple(
            weighted_segment_fit(self.curves, self.basis, 0, m, weights[:, k], floor=self.floor)
            for k in range(self.n_clusters)
        )
        return PrmParams(
            alpha=_simplex(weights),
            beta=np.vstack([fit.beta for fit in fits]),
            sigma2=np.array([fit.sigma2 for fit in fits]),
            degree=self.config.degree,
            n_floored=sum(fit.floored for fit in fits),
        )

    def log_density(self, params: PrmParams) -> np.ndarray:
        sq = squared_distances(self.curves.values, self.prototypes(params))
        m = self.curves.n_points
        return -0.5 * m * (LOG_2PI + np.log(params.sigma2))[None, :] - sq / (2.0 * params.sigma2[None, :])

    def n_free_parameters(self, params: PrmParams) -> int:
        return params.n_free_parameters()

    def prototypes(self, params: PrmParams) -> np.ndarray:
        return params.beta @ self.basis.rows.T

    def floor_activations(self, params: PrmParams) -> int:
        return params.n_floored


def fit_prm(curves: CurveSet, config: Optional[FitConfig] = None) -> FitResult:
    """PRM by EM, or by CEM when ``config.classification`` is set."""
    config = config or FitConfig()
    mixture = PrmMixture(curves, config)
    result = run_em(mixture, hard=config.classification)
    logger.info(
        "%s K=%d p=%d: criterion %.4f after %d iterations",
        mixture.kind.value, config.n_clusters, config.degree, result.trace[-1], result.n_iter,
    )
    return result


@dataclass(frozen=True)
class GmmParams:
    alpha: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    covariance: str = "diag"
    n_floored: int = 0

    @property
    def n_clusters(self) -> int:
        return self.alpha.size

    def n_free_parameters(self) -> int:
        m = self.means.shape[1]
        per_cluster = m + 1 if self.covariance == "spherical" else 2 * m
        return self.n_clusters * (per_cluster + 1) - 1

    def to_dict(self) -> Dict[str, Any]:
        variances = self.variances[:, 0] if self.covariance == "spherical" else self.variances
        return {
            "alpha": self.alpha.tolist(),
            "covariance": self.covariance,
            "means": self.means.tolist(),
            "variances": variances.tolist(),
        }


class GmmMixture(CurveMixture):
    """Gaussian mixture on the n x m observation matrix, diagonal or spherical covariances."""

    def __init__(self, curves: CurveSet, config: FitConfig):
        if curves.n_curves <= config.n_clusters:
            raise InvalidData(f"GMM needs more curves than clusters, got n={curves.n_curves}, K={config.n_clusters}")
        super().__init__(curves, config)
        self.kind = ModelKind.GMM_CEM if config.classification else ModelKind.GMM_EM

    def initialize(self, labels: np.ndarray, rng: np.random.Generator, restart: int) -> GmmParams:
        return self.m_step(one_hot(labels, self.n_clusters))

    def m_step(self, weights: np.ndarray) -> GmmParams:
        check_cluster_mass(weights)
        Y = self.curves.values
        mass = weights.sum(axis=0)
        means = (weights.T @ Y) / mass[:, None]
        variances = np.vstack(
            [weights[:, k] @ (Y - means[k]) ** 2 / mass[k] for k in range(self.n_clusters)]
        )
        if self.config.covariance == "spherical":
            variances = np.repeat(variances.mean(axis=1, keepdims=True), Y.shape[1], axis=1)
        collapsed = variances < self.floor
        n_floored = int(collapsed.any(axis=1).sum())
        if n_floored:
            logger.debug("Variance floor applied to %d coordinates", int(collapsed.sum()))
        return GmmParams(
            alpha=_simplex(weights),
            means=means,
            variances=np.maximum(variances, self.floor),
            covariance=self.config.covariance,
            n_floored=n_floored,
        )

    def log_density(self, params: GmmParams) -> np.ndarray:
        residuals = self.curves.values[:, None, :] - params.means[None, :, :]
        normaliser = -0.5 * np.sum(LOG_2PI + np.log(params.variances), axis=1)
        return normaliser[None, :] - 0.5 * np.sum(residuals**2 / params.variances[None, :, :], axis=2)

    def n_free_parameters(self, params: GmmParams) -> int:
        return params.n_free_parameters()

    def prototypes(self, params: GmmParams) -> np.ndarray:
        return params.means

    def floor_activations(self, params: GmmParams) -> int:
        return params.n_floored


def fit_gmm(curves: CurveSet, config: Optional[FitConfig] = None) -> FitResult:
    """GMM by EM, or by CEM when ``config.classification`` is set."""
    config = config or FitConfig()
    mixture = GmmMixture(curves, config)
    result = run_em(mixture, hard=config.classification)
    logger.info(
        "%s K=%d (%s): criterion %.4f after %d iterations",
        mixture.kind.value, config.n_clusters, config.covariance, result.trace[-1], result.n_iter,
    )
    return result
