"""Piecewise polynomial regression of a weighted set of curves.

Segment r of a segmentation with boundaries xi covers the 0-based columns
``xi[r]:xi[r+1]``, i.e. the 1-based time indices ``(xi[r], xi[r+1]]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from curvemix.config import Config
from curvemix.dataset import CurveSet
from curvemix.errors import EmptyCluster, InfeasibleSegmentation, InvalidData, SingularSegment

logger = logging.getLogger("curvemix.piecewise")

Criterion = Literal["likelihood", "sse"]


def variance_floor(values: np.ndarray) -> float:
    spread = float(np.var(values))
    return Config.VARIANCE_FLOOR_SCALE * (spread if spread > 0 else 1.0)


@dataclass(frozen=True)
class PolyBasis:
    """Polynomial design rows (1, t, ..., t^p) on the grid mapped affinely onto [0, 1]."""

    degree: int
    grid: np.ndarray
    rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.degree < 0:
            raise InvalidData(f"polynomial degree must be >= 0, got {self.degree}")
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or not np.all(np.diff(grid) > 0):
            raise InvalidData("basis grid must be strictly increasing with at least 2 points")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "rows", self.design(grid))

    @classmethod
    def for_curves(cls, curves: CurveSet, degree: int) -> "PolyBasis":
        return cls(degree=degree, grid=curves.grid)

    @property
    def n_points(self) -> int:
        return self.grid.size

    @property
    def min_segment_length(self) -> int:
        return self.degree + 1

    def design(self, x: np.ndarray) -> np.ndarray:
        t = (np.asarray(x, dtype=float) - self.grid[0]) / (self.grid[-1] - self.grid[0])
        return np.vander(t, self.degree + 1, increasing=True)


@dataclass(frozen=True)
class Segmentation:
    boundaries: Tuple[int, ...]

    def __post_init__(self):
        boundaries = tuple(int(b) for b in self.boundaries)
        if len(boundaries) < 2 or boundaries[0] != 0:
            raise InvalidData(f"boundaries must start at 0 and hold a segment: {boundaries}")
        if any(b <= a for a, b in zip(boundaries, boundaries[1:])):
            raise InvalidData(f"boundaries must be strictly increasing: {boundaries}")
        object.__setattr__(self, "boundaries", boundaries)

    @property
    def n_segments(self) -> int:
        return len(self.boundaries) - 1

    @property
    def n_points(self) -> int:
        return self.boundaries[-1]

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def segments(self) -> List[Tuple[int, int]]:
        return list(zip(self.boundaries, self.boundaries[1:]))

    def segment_index(self) -> np.ndarray:
        """Segment number of every time point."""
        return np.repeat(np.arange(self.n_segments), self.lengths)

    def check(self, n_points: int, min_length: int) -> None:
        if self.n_points != n_points:
            raise InvalidData(f"segmentation ends at {self.n_points}, curves have {n_points} points")
        if np.any(self.lengths < min_length):
            raise InfeasibleSegmentation(
                f"segment shorter than {min_length} points in {self.boundaries}"
            )


def uniform_segmentation(n_points: int, n_segments: int, min_length: int = 1) -> Segmentation:
    check_feasible(n_points, n_segments, min_length)
    return Segmentation(tuple((r * n_points) // n_segments for r in range(n_segments + 1)))


def random_segmentation(
    n_points: int, n_segments: int, min_length: int, rng: np.random.Generator
) -> Segmentation:
    """Uniformly random contiguous segmentation whose segments all hold >= min_length points."""
    check_feasible(n_points, n_segments, min_length)
    slack = n_points - n_segments * min_length
    offsets = np.sort(rng.integers(0, slack + 1, size=n_segments - 1))
    inner = [int(u) + (r + 1) * min_length for r, u in enumerate(offsets)]
    return Segmentation(tuple([0] + inner + [n_points]))


def check_feasible(n_points: int, n_segments: int, min_length: int) -> None:
    if n_segments < 1:
        raise InvalidData(f"need at least one segment, got R={n_segments}")
    if n_segments * min_length > n_points:
        raise InfeasibleSegmentation(
            f"R={n_segments} segments of at least {min_length} points do not fit in m={n_points}"
        )


@dataclass(frozen=True)
class SegmentFit:
    start: int
    end: int
    beta: np.ndarray
    sigma2: float
    weighted_sse: float
    cost: float
    floored: bool = False


@dataclass(frozen=True)
class PiecewiseModel:
    basis: PolyBasis = field(repr=False)
    segmentation: Segmentation
    fits: Tuple[SegmentFit, ...]
    total_cost: float

    @property
    def n_segments(self) -> int:
        return self.segmentation.n_segments

    @property
    def n_floored(self) -> int:
        return sum(fit.floored for fit in self.fits)

    def mean_curve(self) -> np.ndarray:
        return np.concatenate([self.basis.rows[fit.start : fit.end] @ fit.beta for fit in self.fits])

    def variance_curve(self) -> np.ndarray:
        return np.repeat([fit.sigma2 for fit in self.fits], self.segmentation.lengths)

    def with_variance(self, sigma2: float) -> "PiecewiseModel":
        return replace(self, fits=tuple(replace(fit, sigma2=sigma2) for fit in self.fits))

    def to_dict(self) -> Dict:
        return {
            "boundaries": list(self.segmentation.boundaries),
            "total_cost": self.total_cost,
            "segments": [
                {
                    "start": fit.start,
                    "end": fit.end,
                    "beta": fit.beta.tolist(),
                    "sigma2": fit.sigma2,
                }
                for fit in self.fits
            ],
        }


def _solve_normal(A: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batched solve of A beta = c; returns (beta, singular mask).

    Ill-conditioned matrices get a trace-scaled ridge before solving.
    """
    q = A.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(A)
    needs_ridge = ~(cond < Config.RIDGE_CONDITION)
    if needs_ridge.any():
        A = A.copy()
        scale = Config.RIDGE * np.trace(A, axis1=-2, axis2=-1)[needs_ridge] / q
        A[needs_ridge] += scale[:, None, None] * np.eye(q)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond[needs_ridge] = np.linalg.cond(A[needs_ridge])
    singular = ~(cond < Config.SINGULAR_CONDITION)
    beta = np.zeros(c.shape)
    ok = ~singular
    if ok.any():
        beta[ok] = np.linalg.solve(A[ok], c[ok][..., None])[..., 0]
    return beta, singular


def _check_weights(curves: CurveSet, weights: Sequence[float]) -> Tuple[np.ndarray, float]:
    w = np.asarray(weights, dtype=float)
    if w.shape != (curves.n_curves,):
        raise InvalidData(f"{w.size} weights for {curves.n_curves} curves")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidData("weights must be finite and non-negative")
    total = float(w.sum())
    if total <= 0:
        raise EmptyCluster([])
    return w, total


def _plug_in(sse: np.ndarray, total_weight: float, length: np.ndarray, floor: float, criterion: Criterion):
    raw = sse / (total_weight * length)
    sigma2 = np.maximum(raw, floor)
    if criterion == "sse":
        cost = sse
    else:
        cost = total_weight * length * (1.0 + np.log(sigma2))
    return sigma2, cost, raw < floor


def weighted_segment_fit(
    curves: CurveSet,
    basis: PolyBasis,
    a: int,
    b: int,
    weights: Sequence[float],
    floor: Optional[float] = None,
    criterion: Criterion = "likelihood",
) -> SegmentFit:
    """Weighted least-squares polynomial fit of every curve on the window (a, b]."""
    m = curves.n_points
    if not 0 <= a < b <= m or b - a < basis.min_segment_length:
        raise InfeasibleSegmentation(
            f"window ({a}, {b}] is not a valid segment of {m} points with length >= {basis.min_segment_length}"
        )
    w, total = _check_weights(curves, weights)
    if floor is None:
        floor = variance_floor(curves.values)

    X = basis.rows[a:b]
    Y = curves.values[:, a:b]
    A = total * (X.T @ X)
    c = X.T @ (w @ Y)
    beta, singular = _solve_normal(A[None], c[None])
    if singular[0]:
        raise SingularSegment(f"normal matrix of window ({a}, {b}] is singular")
    beta = beta[0]
    residuals = Y - X @ beta
    sse = float(w @ np.sum(residuals**2, axis=1))
    sigma2, cost, floored = _plug_in(np.float64(sse), total, np.float64(b - a), floor, criterion)
    return SegmentFit(
        start=a,
        end=b,
        beta=beta,
        sigma2=float(sigma2),
        weighted_sse=sse,
        cost=float(cost),
        floored=bool(floored),
    )


@dataclass(frozen=True)
class CostTable:
    """c(a, b) for every window (a, b]; +inf where the window is too short or singular."""

    costs: np.ndarray
    min_length: int
    criterion: Criterion = "likelihood"

    @property
    def n_points(self) -> int:
        return self.costs.shape[0] - 1

    @property
    def n_entries(self) -> int:
        a, b = np.triu_indices(self.n_points + 1, k=self.min_length)
        return a.size

    def cost(self, a: int, b: int) -> float:
        return float(self.costs[a, b])


def segment_cost_table(
    curves: CurveSet,
    basis: PolyBasis,
    weights: Sequence[float],
    floor: Optional[float] = None,
    criterion: Criterion = "likelihood",
) -> CostTable:
    """All window costs from prefix sums of the per-time-point sufficient statistics."""
    w, total = _check_weights(curves, weights)
    if floor is None:
        floor = variance_floor(curves.values)
    m = curves.n_points
    X = basis.rows
    q = X.shape[1]

    weighted_sum = w @ curves.values
    weighted_squares = w @ curves.values**2
    Sxx = np.zeros((m + 1, q, q))
    Sxx[1:] = np.cumsum(total * (X[:, :, None] * X[:, None, :]), axis=0)
    Sxy = np.zeros((m + 1, q))
    Sxy[1:] = np.cumsum(X * weighted_sum[:, None], axis=0)
    Syy = np.zeros(m + 1)
    Syy[1:] = np.cumsum(weighted_squares)

    a, b = np.triu_indices(m + 1, k=basis.min_segment_length)
    c = Sxy[b] - Sxy[a]
    beta, singular = _solve_normal(Sxx[b] - Sxx[a], c)
    sse = np.maximum(Syy[b] - Syy[a] - np.einsum("wq,wq->w", beta, c), 0.0)
    _, window_costs, _ = _plug_in(sse, total, (b - a).astype(float), floor, criterion)
    window_costs[singular] = np.inf
    if singular.any():
        logger.debug("%d of %d windows have singular normal matrices", int(singular.sum()), singular.size)

    costs = np.full((m + 1, m + 1), np.inf)
    costs[a, b] = window_costs
    return CostTable(costs=costs, min_length=basis.min_segment_length, criterion=criterion)


def optimal_segmentation(
    cost_table: Union[CostTable, np.ndarray], n_segments: int, min_length: Optional[int] = None
) -> Tuple[Segmentation, float]:
    """Global minimiser of sum_r c(xi_r, xi_{r+1}) by dynamic programming.

    Ties resolve to the smallest boundary index at every backtracking step.
    """
    if isinstance(cost_table, CostTable):
        table = cost_table.costs
        min_length = cost_table.min_length if min_length is None else min_length
    else:
        table = np.asarray(cost_table, dtype=float)
        min_length = 1 if min_length is None else min_length
    m = table.shape[0] - 1
    check_feasible(m, n_segments, min_length)

    length = np.arange(m + 1)[None, :] - np.arange(m + 1)[:, None]
    table = np.where(length >= min_length, table, np.inf)

    D = np.full((n_segments, m + 1), np.inf)
    back = np.zeros((n_segments, m + 1), dtype=int)
    D[0] = table[0]
    columns = np.arange(m + 1)
    for r in range(1, n_segments):
        totals = D[r - 1][:, None] + table
        back[r] = np.argmin(totals, axis=0)
        D[r] = totals[back[r], columns]

    total_cost = float(D[n_segments - 1, m])
    if not np.isfinite(total_cost):
        raise SingularSegment(f"no segmentation into {n_segments} segments has a finite cost")
    boundaries = [m]
    for r in range(n_segments - 1, 0, -1):
        boundaries.append(int(back[r, boundaries[-1]]))
    boundaries.append(0)
    return Segmentation(tuple(reversed(boundaries))), total_cost


def fit_segments(
    curves: CurveSet,
    basis: PolyBasis,
    segmentation: Segmentation,
    weights: Sequence[float],
    floor: Optional[float] = None,
    criterion: Criterion = "likelihood",
) -> PiecewiseModel:
    """Per-segment weighted fits for a fixed segmentation."""
    segmentation.check(curves.n_points, basis.min_segment_length)
    if floor is None:
        floor = variance_floor(curves.values)
    fits = tuple(
        weighted_segment_fit(curves, basis, a, b, weights, floor=floor, criterion=criterion)
        for a, b in segmentation.segments()
    )
    floored = sum(fit.floored for fit in fits)
    if floored:
        logger.debug("variance floor active on %d of %d segments", floored, len(fits))
    return PiecewiseModel(
        basis=basis,
        segmentation=segmentation,
        fits=fits,
        total_cost=float(sum(fit.cost for fit in fits)),
    )


def fit_piecewise(
    curves: CurveSet,
    basis: PolyBasis,
    n_segments: int,
    weights: Sequence[float],
    floor: Optional[float] = None,
    criterion: Criterion = "likelihood",
) -> PiecewiseModel:
    """Optimal segmentation of the weighted curve set followed by per-segment refits."""
    check_feasible(curves.n_points, n_segments, basis.min_segment_length)
    if floor is None:
        floor = variance_floor(curves.values)
    table = segment_cost_table(curves, basis, weights, floor=floor, criterion=criterion)
    segmentation, _ = optimal_segmentation(table, n_segments)
    return fit_segments(curves, basis, segmentation, weights, floor=floor, criterion=criterion)
