import os
from typing import List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

load_dotenv()


class Config:
    MAX_ITER = int(os.getenv("CURVEMIX_MAX_ITER", "1000"))
    TOL = float(os.getenv("CURVEMIX_TOL", "1e-6"))
    N_RESTARTS = int(os.getenv("CURVEMIX_N_RESTARTS", "10"))
    THREADS = int(os.getenv("CURVEMIX_THREADS", "1"))

    LOG_LEVEL = os.getenv("CURVEMIX_LOG_LEVEL", "INFO")

    # sigma^2 floor is this fraction of the global variance of the observations
    VARIANCE_FLOOR_SCALE = float(os.getenv("CURVEMIX_VARIANCE_FLOOR_SCALE", "1e-8"))
    RIDGE = float(os.getenv("CURVEMIX_RIDGE", "1e-10"))
    # normal matrices above this condition number get the ridge
    RIDGE_CONDITION = float(os.getenv("CURVEMIX_RIDGE_CONDITION", "1e8"))
    SINGULAR_CONDITION = float(os.getenv("CURVEMIX_SINGULAR_CONDITION", "1e14"))

    EMPTY_CLUSTER_MASS = float(os.getenv("CURVEMIX_EMPTY_CLUSTER_MASS", "1e-8"))
    MONOTONICITY_TOL = float(os.getenv("CURVEMIX_MONOTONICITY_TOL", "1e-8"))
    RESTART_TIE_TOL = float(os.getenv("CURVEMIX_RESTART_TIE_TOL", "1e-9"))

    EXHAUSTIVE_PERMUTATION_MAX_K = int(os.getenv("CURVEMIX_EXHAUSTIVE_PERMUTATION_MAX_K", "8"))


class FitConfig(BaseModel):
    """Settings shared by every fitting algorithm.

    Cluster indices are 0-based everywhere in memory, including ``initial_labels``.
    """

    model_config = ConfigDict(frozen=True)

    n_clusters: int = Field(2, ge=1)
    n_regimes: Union[int, List[int]] = 1
    degree: int = Field(1, ge=0)
    max_iter: int = Field(default_factory=lambda: Config.MAX_ITER, ge=1)
    tol: float = Field(default_factory=lambda: Config.TOL, gt=0.0)
    n_restarts: int = Field(default_factory=lambda: Config.N_RESTARTS, ge=1)
    seed: int = 0
    init: Literal["random", "labels"] = "random"
    initial_labels: Optional[List[int]] = None
    segmentation_init: Literal["uniform", "random", "optimal"] = "random"

    classification: bool = False
    covariance: Literal["diag", "spherical"] = "diag"
    pooled_variance: bool = False
    fixed_proportions: bool = False

    stop_on_criterion: bool = True
    record_history: bool = False
    n_jobs: int = Field(default_factory=lambda: Config.THREADS, ge=1)

    @model_validator(mode="after")
    def _check_consistency(self) -> "FitConfig":
        if isinstance(self.n_regimes, list):
            if len(self.n_regimes) != self.n_clusters:
                raise ValueError(
                    f"n_regimes lists {len(self.n_regimes)} values for {self.n_clusters} clusters"
                )
            if any(r < 1 for r in self.n_regimes):
                raise ValueError("every cluster needs at least one regime")
        elif self.n_regimes < 1:
            raise ValueError("n_regimes must be >= 1")
        if self.init == "labels":
            if self.initial_labels is None:
                raise ValueError("init='labels' requires initial_labels")
            if any(z < 0 or z >= self.n_clusters for z in self.initial_labels):
                raise ValueError("initial_labels must lie in 0..n_clusters-1")
        return self

    def regimes_per_cluster(self) -> List[int]:
        if isinstance(self.n_regimes, list):
            return list(self.n_regimes)
        return [self.n_regimes] * self.n_clusters
