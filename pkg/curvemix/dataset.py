"""Curve sets, the CSV curve format and the piecewise-linear simulation protocol."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from curvemix.errors import InvalidData, ParseError

logger = logging.getLogger("curvemix.dataset")

GRID_MARKER = "#grid"

PathLike = Union[str, Path]


@dataclass(frozen=True)
class CurveSet:
    """n curves observed on one shared, strictly increasing grid of m time points.

    ``labels`` are 0-based cluster indices; the CSV format stores them 1-based.
    """

    values: np.ndarray
    grid: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        grid = np.asarray(self.grid, dtype=float)
        if values.ndim != 2:
            raise InvalidData(f"curve values must be an n x m matrix, got shape {values.shape}")
        n, m = values.shape
        if n < 1:
            raise InvalidData("a curve set needs at least one curve")
        if m < 2:
            raise InvalidData(f"curves need at least 2 time points, got m={m}")
        if grid.shape != (m,):
            raise InvalidData(f"grid has {grid.size} points for curves of length {m}")
        if not np.all(np.diff(grid) > 0):
            raise InvalidData("grid must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise InvalidData("curve values contain non-finite entries")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "grid", grid)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,):
                raise InvalidData(f"{labels.size} labels for {n} curves")
            if not np.issubdtype(labels.dtype, np.integer):
                if not np.all(np.equal(np.mod(labels, 1), 0)):
                    raise InvalidData("labels must be integers")
                labels = labels.astype(int)
            if np.any(labels < 0):
                raise InvalidData("labels must be non-negative cluster indices")
            object.__setattr__(self, "labels", labels.astype(int))

    @property
    def n_curves(self) -> int:
        return self.values.shape[0]

    @property
    def n_points(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "CurveSet":
        return CurveSet(values=values, grid=self.grid, labels=self.labels)


class CsvLayout(BaseModel):
    grid_header: bool = False
    label_column: bool = False

    @classmethod
    def sniff(cls, path: PathLike) -> "CsvLayout":
        """Detect the ``#grid`` header row; with a header, its width tells whether rows carry a label."""
        head = _read_cells(path, nrows=2)
        first = str(head.iat[0, 0]).strip()
        if not first.startswith(GRID_MARKER):
            return cls(grid_header=False, label_column=False)
        if len(head) < 2:
            return cls(grid_header=True, label_column=False)
        header_width, row_width = _row_widths(head)
        return cls(grid_header=True, label_column=bool(row_width == header_width))


def _read_cells(path: PathLike, nrows: Optional[int] = None) -> pd.DataFrame:
    try:
        return pd.read_csv(
            path,
            header=None,
            dtype=str,
            keep_default_na=False,
            na_values=[""],
            skip_blank_lines=True,
            nrows=nrows,
        )
    except pd.errors.EmptyDataError as exc:
        raise InvalidData(f"{path} holds no curve rows") from exc
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        row = int(match.group(1)) if match else None
        raise ParseError("ragged row", row=row) from exc


def _row_widths(cells: pd.DataFrame) -> np.ndarray:
    """Cells up to the last filled one in each row; pandas pads short rows with NaN."""
    filled = cells.notna().to_numpy()
    widths = filled.shape[1] - np.argmax(filled[:, ::-1], axis=1)
    return np.where(filled.any(axis=1), widths, 0)


def _is_number(cell: Any) -> bool:
    try:
        float(cell)
    except (TypeError, ValueError):
        return False
    return True


def _to_numbers(cells: pd.DataFrame, row_offset: int, col_offset: int) -> np.ndarray:
    # astype(float) goes through float() per cell, which is correctly rounded; pd.to_numeric is not
    raw = cells.to_numpy(dtype=object)
    missing = cells.isna().to_numpy()
    if not missing.any():
        try:
            return raw.astype(float)
        except (TypeError, ValueError):
            pass
    for r, c in np.ndindex(raw.shape):
        if missing[r, c] or not _is_number(raw[r, c]):
            cell = "" if missing[r, c] else raw[r, c]
            raise ParseError(f"non-numeric cell {cell!r}", row=r + row_offset + 1, col=c + col_offset + 1)
    return raw.astype(float)


def load_csv(path: PathLike, layout: Optional[CsvLayout] = None) -> CurveSet:
    """Read a curve CSV: one curve per row, optional ``#grid`` header, optional leading label."""
    if layout is None:
        layout = CsvLayout.sniff(path)
    cells = _read_cells(path)

    widths = _row_widths(cells)
    start = 1 if layout.grid_header else 0
    if len(cells) <= start:
        raise InvalidData(f"{path} holds no curve rows")

    label_width = 1 if layout.label_column else 0
    # with a header, its grid fixes m; without one, the first curve row does
    m = int(widths[0]) - 1 if layout.grid_header else int(widths[0]) - label_width
    data_width = m + label_width
    for offset, width in enumerate(widths[start:]):
        if width != data_width:
            raise ParseError(f"ragged row: {int(width)} cells, expected {data_width}", row=start + offset + 1)
    if m < 2:
        raise InvalidData(f"curves need at least 2 time points, got m={m}")

    body = cells.iloc[start:, :data_width].reset_index(drop=True)
    labels = None
    if layout.label_column:
        raw = _to_numbers(body.iloc[:, [0]], row_offset=start, col_offset=0)[:, 0]
        if np.any(raw != np.round(raw)) or np.any(raw < 1):
            raise ParseError("labels must be integers >= 1", row=None, col=1)
        labels = raw.astype(int) - 1
    values = _to_numbers(body.iloc[:, label_width:], row_offset=start, col_offset=label_width)

    if layout.grid_header:
        header = cells.iloc[0]
        if not str(header.iat[0]).strip().startswith(GRID_MARKER):
            raise ParseError(f"header row must start with {GRID_MARKER}", row=1, col=1)
        grid_cells = header.iloc[1 : 1 + m].to_frame().T
        grid = _to_numbers(grid_cells, row_offset=0, col_offset=1)[0]
    else:
        grid = np.arange(1, m + 1, dtype=float)

    curves = CurveSet(values=values, grid=grid, labels=labels)
    logger.info("Loaded %d curves of %d points from %s", curves.n_curves, curves.n_points, path)
    return curves


def save_csv(curves: CurveSet, path: PathLike) -> None:
    body = pd.DataFrame(curves.values)
    if curves.labels is not None:
        body.insert(0, "label", curves.labels + 1)
    header = ",".join([GRID_MARKER] + [repr(float(t)) for t in curves.grid])
    with open(path, "w", newline="") as handle:
        handle.write(header + "\n")
        body.to_csv(handle, header=False, index=False)


def write_metadata(path: PathLike, mapping: Dict[str, Any]) -> None:
    lines = [f"{key}: {json.dumps(value, sort_keys=True)}" for key, value in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metadata(path: PathLike) -> Dict[str, Any]:
    result: Dict[str, Any] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(": ")
        result[key] = json.loads(value)
    return result


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


class RegimeSpec(BaseModel):
    """Mean ``slope * j + intercept`` in the raw 1-based time index j, noise sd ``sigma``."""

    intercept: float
    slope: float = 0.0
    sigma: float = Field(ge=0.0)


class ClusterSpec(BaseModel):
    boundaries: List[int]
    regimes: List[RegimeSpec]

    @field_validator("boundaries")
    @classmethod
    def _increasing(cls, boundaries: List[int]) -> List[int]:
        if len(boundaries) < 2 or boundaries[0] != 0:
            raise ValueError("boundaries must start at 0 and hold at least one segment")
        if any(b <= a for a, b in zip(boundaries, boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")
        return boundaries

    @model_validator(mode="after")
    def _one_regime_per_segment(self) -> "ClusterSpec":
        if len(self.regimes) != len(self.boundaries) - 1:
            raise ValueError(
                f"{len(self.regimes)} regimes for {len(self.boundaries) - 1} segments"
            )
        return self


class SimulationSpec(BaseModel):
    n: int = Field(ge=1)
    m: int = Field(ge=2)
    mixing: List[float]
    clusters: List[ClusterSpec]
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "SimulationSpec":
        if len(self.mixing) != len(self.clusters):
            raise ValueError(f"{len(self.mixing)} proportions for {len(self.clusters)} clusters")
        if any(a < 0 for a in self.mixing):
            raise ValueError("mixing proportions must be non-negative")
        if abs(sum(self.mixing) - 1.0) > 1e-12:
            raise ValueError(f"mixing proportions sum to {sum(self.mixing)!r}, not 1")
        for k, cluster in enumerate(self.clusters):
            if cluster.boundaries[-1] != self.m:
                raise ValueError(f"cluster {k + 1} boundaries end at {cluster.boundaries[-1]}, not m={self.m}")
        return self

    def mean_curves(self) -> np.ndarray:
        j = np.arange(1, self.m + 1, dtype=float)
        means = np.empty((len(self.clusters), self.m))
        for k, cluster in enumerate(self.clusters):
            for (a, b), regime in zip(zip(cluster.boundaries, cluster.boundaries[1:]), cluster.regimes):
                means[k, a:b] = regime.slope * j[a:b] + regime.intercept
        return means

    def sd_curves(self) -> np.ndarray:
        sds = np.empty((len(self.clusters), self.m))
        for k, cluster in enumerate(self.clusters):
            for (a, b), regime in zip(zip(cluster.boundaries, cluster.boundaries[1:]), cluster.regimes):
                sds[k, a:b] = regime.sigma
        return sds


def generate(spec: SimulationSpec) -> CurveSet:
    rng = np.random.default_rng(spec.seed)
    labels = rng.choice(len(spec.clusters), size=spec.n, p=np.asarray(spec.mixing))
    noise = rng.standard_normal((spec.n, spec.m))
    values = spec.mean_curves()[labels] + spec.sd_curves()[labels] * noise
    grid = np.arange(1, spec.m + 1, dtype=float)
    logger.debug("Generated %d curves (cluster sizes %s)", spec.n, np.bincount(labels, minlength=len(spec.clusters)))
    return CurveSet(values=values, grid=grid, labels=labels)


# (intercept, slope, sigma) per regime
_TABLE1_CLUSTERS = (
    ([0, 20, 60, 115, 140, 160], [(5.0, 0.0, 0.8), (2.5, 0.125, 0.8), (10.0, 0.0, 0.6), (10.0, 0.0, 0.8), (6.0, 0.0, 0.8)]),
    ([0, 20, 70, 90, 140, 160], [(5.0, 0.0, 0.8), (3.0, 0.1, 0.8), (10.0, 0.0, 0.8), (10.0, 0.0, 0.6), (5.5, 0.0, 0.8)]),
)


def table1_spec(noise_shift: float = 0.0, unbalanced: bool = False, n: int = 100, seed: int = 0) -> SimulationSpec:
    """Two-cluster, five-regime piecewise-linear protocol on m=160 points.

    ``unbalanced`` switches to mixing (0.2, 0.8) with the cluster-1 regime-3/4 noise
    levels set to 0.7 and 0.6.
    """
    clusters = []
    for k, (boundaries, regimes) in enumerate(_TABLE1_CLUSTERS):
        specs = []
        for r, (intercept, slope, sigma) in enumerate(regimes):
            if unbalanced and k == 0 and r == 2:
                sigma = 0.7
            elif unbalanced and k == 0 and r == 3:
                sigma = 0.6
            shifted = sigma + noise_shift
            if shifted < 0:
                raise InvalidData(f"negative sigma: sigma_{k + 1}{r + 1} = {sigma} + {noise_shift} < 0")
            specs.append(RegimeSpec(intercept=intercept, slope=slope, sigma=shifted))
        clusters.append(ClusterSpec(boundaries=list(boundaries), regimes=specs))
    mixing = [0.2, 0.8] if unbalanced else [0.5, 0.5]
    try:
        return SimulationSpec(n=n, m=160, mixing=mixing, clusters=clusters, seed=seed)
    except ValidationError as exc:
        raise InvalidData(str(exc)) from exc
