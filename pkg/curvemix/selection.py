"""Penalised-likelihood model selection over (K, R, p) grids."""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, field_validator

from curvemix.baselines import fit_gmm, fit_prm
from curvemix.config import FitConfig
from curvemix.dataset import CurveSet
from curvemix.errors import CurveMixError, InvalidData, SelectionFailed
from curvemix.mixture import FitResult, ModelKind
from curvemix.pwrm_cem import fit_cem, fit_kmeans_like
from curvemix.pwrm_em import fit_em

logger = logging.getLogger("curvemix.selection")

Criterion = Literal["bic", "icl"]


def fit_model(curves: CurveSet, model: str, config: FitConfig) -> FitResult:
    """Dispatches to the fitting routine of ``model`` (a ``ModelKind`` value)."""
    kind = ModelKind(model)
    if kind is ModelKind.PWRM_EM:
        return fit_em(curves, config)
    if kind is ModelKind.PWRM_CEM:
        return fit_cem(curves, config)
    if kind is ModelKind.KMEANS:
        return fit_kmeans_like(curves, config)
    fitter: Callable[[CurveSet, FitConfig], FitResult] = fit_prm if kind.family == "prm" else fit_gmm
    return fitter(curves, config.model_copy(update={"classification": kind.hard}))


def n_free_parameters(fit: FitResult) -> int:
    return fit.params.n_free_parameters()


def _penalty(fit: FitResult) -> float:
    return n_free_parameters(fit) * np.log(fit.n_curves) / 2.0


def _check_kind(fit: FitResult, model_kind: Optional[str]) -> None:
    if model_kind is not None and ModelKind(model_kind) is not fit.model_kind:
        raise InvalidData(f"fit is a {fit.model_kind.value} result, not {model_kind}")


def bic(fit: FitResult, model_kind: Optional[str] = None) -> float:
    """L - nu log(n) / 2; larger is better."""
    _check_kind(fit, model_kind)
    return fit.log_likelihood - _penalty(fit)


def icl(fit: FitResult, model_kind: Optional[str] = None) -> float:
    """L_c - nu log(n) / 2, with L_c = -E/2 for the K-means-like algorithm."""
    _check_kind(fit, model_kind)
    return fit.complete_log_likelihood - _penalty(fit)


_RANGE = re.compile(r"^\s*(\d+)\s*(?:\.\.\s*(\d+))?\s*$")


class GridRanges(BaseModel):
    K: List[int] = Field(min_length=1)
    R: List[int] = Field(min_length=1)
    p: List[int] = Field(min_length=1)

    @field_validator("K", "R")
    @classmethod
    def _positive(cls, values: List[int]) -> List[int]:
        if any(v < 1 for v in values):
            raise ValueError("K and R values must be >= 1")
        return sorted(set(values))

    @field_validator("p")
    @classmethod
    def _non_negative(cls, values: List[int]) -> List[int]:
        if any(v < 0 for v in values):
            raise ValueError("p values must be >= 0")
        return sorted(set(values))

    @classmethod
    def parse(cls, text: str) -> "GridRanges":
        """Parses ``"Kmin..Kmax,Rmin..Rmax,pmin..pmax"``; a single number is a one-value range."""
        parts = text.split(",")
        if len(parts) != 3:
            raise InvalidData(f"grid must read Kmin..Kmax,Rmin..Rmax,pmin..pmax, got {text!r}")
        ranges = []
        for part in parts:
            match = _RANGE.match(part)
            if match is None:
                raise InvalidData(f"cannot parse grid range {part!r}")
            low = int(match.group(1))
            high = int(match.group(2)) if match.group(2) else low
            if high < low:
                raise InvalidData(f"empty grid range {part!r}")
            ranges.append(list(range(low, high + 1)))
        return cls(K=ranges[0], R=ranges[1], p=ranges[2])


@dataclass
class GridCell:
    K: int
    R: int
    p: int
    status: str = "ok"
    log_likelihood: float = float("nan")
    complete_log_likelihood: float = float("nan")
    n_params: Optional[int] = None
    bic: float = float("nan")
    icl: float = float("nan")
    message: str = ""
    fit: Optional[FitResult] = field(default=None, repr=False)

    def value(self, criterion: Criterion) -> float:
        return self.bic if criterion == "bic" else self.icl


@dataclass
class SelectionGrid:
    algorithm: str
    criterion: Criterion
    ranges: GridRanges
    cells: List[GridCell]

    @property
    def fitted(self) -> List[GridCell]:
        return [cell for cell in self.cells if cell.status == "ok"]

    @property
    def chosen(self) -> GridCell:
        """Cell with the highest criterion; ties keep the first cell in grid order."""
        fitted = self.fitted
        if not fitted:
            raise SelectionFailed("no grid cell was fitted")
        values = [cell.value(self.criterion) for cell in fitted]
        return fitted[int(np.argmax(values))]

    @property
    def table(self) -> pd.DataFrame:
        rows = [
            {
                "K": cell.K,
                "R": cell.R,
                "p": cell.p,
                "status": cell.status,
                "L": cell.log_likelihood,
                "L_c": cell.complete_log_likelihood,
                "nu": cell.n_params,
                "BIC": cell.bic,
                "ICL": cell.icl,
                "message": cell.message,
            }
            for cell in self.cells
        ]
        return pd.DataFrame(rows, columns=["K", "R", "p", "status", "L", "L_c", "nu", "BIC", "ICL", "message"])


def _effective_ranges(kind: ModelKind, ranges: GridRanges) -> GridRanges:
    if kind is ModelKind.KMEANS:
        return ranges.model_copy(update={"p": [0]})
    if kind.family == "prm":
        return ranges.model_copy(update={"R": [1]})
    if kind.family == "gmm":
        return ranges.model_copy(update={"R": [1], "p": [0]})
    return ranges


def _fit_cell(curves: CurveSet, kind: ModelKind, config: FitConfig, cell: GridCell) -> GridCell:
    cell_config = config.model_copy(update={"n_clusters": cell.K, "n_regimes": cell.R, "degree": cell.p})
    try:
        fit = fit_model(curves, kind.value, FitConfig.model_validate(cell_config.model_dump()))
    except CurveMixError as exc:
        logger.warning("Grid cell K=%d R=%d p=%d failed: %s", cell.K, cell.R, cell.p, exc)
        cell.status = "failed"
        cell.message = str(exc)
        return cell
    cell.log_likelihood = fit.log_likelihood
    cell.complete_log_likelihood = fit.complete_log_likelihood
    cell.n_params = n_free_parameters(fit)
    cell.bic = bic(fit)
    cell.icl = icl(fit)
    cell.fit = fit
    return cell


def select_model(
    curves: CurveSet,
    grid: GridRanges,
    algorithm: str,
    config: Optional[FitConfig] = None,
    criterion: Criterion = "icl",
) -> SelectionGrid:
    """Fits every feasible cell with the same seed and keeps the best by BIC or ICL."""
    config = config or FitConfig()
    kind = ModelKind(algorithm)
    ranges = _effective_ranges(kind, grid)
    if config.init == "labels":
        config = config.model_copy(update={"init": "random", "initial_labels": None})

    cells: List[GridCell] = []
    pending: List[GridCell] = []
    for K, R, p in itertools.product(ranges.K, ranges.R, ranges.p):
        cell = GridCell(K=K, R=R, p=p)
        cells.append(cell)
        if R * (p + 1) > curves.n_points:
            cell.status = "skipped"
            cell.message = f"R*(p+1)={R * (p + 1)} exceeds m={curves.n_points}"
            logger.warning("Skipping grid cell K=%d R=%d p=%d: %s", K, R, p, cell.message)
        else:
            pending.append(cell)

    cell_jobs = config.n_jobs
    inner = config.model_copy(update={"n_jobs": 1}) if cell_jobs > 1 else config
    logger.info("Fitting %d grid cells of %s (%d skipped)", len(pending), kind.value, len(cells) - len(pending))
    Parallel(n_jobs=cell_jobs, prefer="threads")(
        delayed(_fit_cell)(curves, kind, inner, cell) for cell in pending
    )

    result = SelectionGrid(algorithm=kind.value, criterion=criterion, ranges=ranges, cells=cells)
    if not result.fitted:
        logger.error("Every grid cell of %s failed or was skipped", kind.value)
        raise SelectionFailed(f"no cell of the {kind.value} grid could be fitted")
    chosen = result.chosen
    logger.info(
        "Selected K=%d R=%d p=%d by %s (%.4f)", chosen.K, chosen.R, chosen.p, criterion.upper(), chosen.value(criterion)
    )
    return result
