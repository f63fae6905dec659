"""Run directories: result files and the ``manifest.txt`` describing how they were produced."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from curvemix import __version__
from curvemix.dataset import CsvLayout, CurveSet, load_csv, save_csv, write_metadata
from curvemix.metrics import EvalReport, prototypes
from curvemix.mixture import FitResult, ModelKind
from curvemix.selection import SelectionGrid, bic, icl, n_free_parameters

logger = logging.getLogger("curvemix.reporting")

PathLike = Union[str, Path]

MANIFEST = "manifest.txt"
RESULT_LAYOUT = CsvLayout(grid_header=True, label_column=False)


def file_digest(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class RunManifest:
    command: str
    seed: Optional[int]
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    version: str = __version__
    started_at: str = ""
    elapsed_seconds: float = 0.0
    _clock: float = field(default=0.0, repr=False)

    @classmethod
    def start(cls, command: str, seed: Optional[int], inputs: Iterable[PathLike] = ()) -> "RunManifest":
        manifest = cls(
            command=command,
            seed=seed,
            inputs={str(path): file_digest(path) for path in inputs},
            started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )
        manifest._clock = time.perf_counter()
        return manifest

    def write(self, directory: PathLike, config: Optional[Dict[str, Any]] = None) -> Path:
        if config is not None:
            self.config = config
        self.elapsed_seconds = time.perf_counter() - self._clock
        lines = [
            f"command: {self.command}",
            f"seed: {self.seed}",
            f"version: {self.version}",
        ]
        lines += [f"config.{key}: {json.dumps(value, sort_keys=True)}" for key, value in self.config.items()]
        lines += [f"input.{path}.sha256: {digest}" for path, digest in self.inputs.items()]
        lines += [f"started_at: {self.started_at}", f"elapsed_seconds: {self.elapsed_seconds:.3f}"]
        path = Path(directory) / MANIFEST
        path.write_text("\n".join(lines) + "\n")
        return path


def run_directory(path: PathLike) -> Path:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _criterion_name(fit: FitResult) -> str:
    if fit.model_kind is ModelKind.KMEANS:
        return "distortion"
    return "complete_log_likelihood" if fit.model_kind.hard else "log_likelihood"


def fit_summary(fit: FitResult) -> Dict[str, Any]:
    return {
        "model": fit.model_kind.value,
        "n_clusters": fit.n_clusters,
        "n_curves": fit.n_curves,
        "n_points": fit.n_points,
        "converged": fit.converged,
        "n_iter": fit.n_iter,
        "restart": fit.restart,
        "seed": fit.seed,
        "log_likelihood": fit.log_likelihood,
        "complete_log_likelihood": fit.complete_log_likelihood,
        "n_free_parameters": n_free_parameters(fit),
        "bic": bic(fit),
        "icl": icl(fit),
        "events": [[iteration, message] for iteration, message in fit.events],
        "diagnostics": fit.diagnostics,
        "params": fit.params.to_dict(),
    }


def segment_table(curves: CurveSet, fit: FitResult) -> Optional[pd.DataFrame]:
    """One row per cluster and segment with its coefficients in normalised time; None for GMM."""
    family = fit.model_kind.family
    rows: List[Dict[str, Any]] = []
    if family in ("pwrm", "kmeans"):
        for k, model in enumerate(fit.params.clusters):
            for r, seg in enumerate(model.fits):
                rows.append({"cluster": k + 1, "segment": r + 1, "start": seg.start, "end": seg.end,
                             "sigma2": seg.sigma2, **{f"coef_{d}": c for d, c in enumerate(seg.beta)}})
    elif family == "prm":
        for k, (beta, sigma2) in enumerate(zip(fit.params.beta, fit.params.sigma2)):
            rows.append({"cluster": k + 1, "segment": 1, "start": 0, "end": curves.n_points,
                         "sigma2": float(sigma2), **{f"coef_{d}": c for d, c in enumerate(beta)}})
    else:
        return None
    table = pd.DataFrame(rows)
    table.insert(4, "t_start", curves.grid[table["start"].to_numpy()])
    table.insert(5, "t_end", curves.grid[table["end"].to_numpy() - 1])
    return table


def history_table(fit: FitResult) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "iteration": record.iteration,
                "distortion": record.distortion,
                "boundaries": json.dumps([list(b) for b in record.segmentations]) if record.segmentations else "",
                "labels": " ".join(str(z + 1) for z in record.labels),
            }
            for record in fit.history
        ],
        columns=["iteration", "distortion", "boundaries", "labels"],
    )


def _save_table(path: Path, columns: Sequence[str], values: np.ndarray) -> None:
    """Numeric result tables use the curve CSV layout; the grid row holds 0..c-1 as column ids."""
    save_csv(CurveSet(values=values, grid=np.arange(len(columns), dtype=float)), path)


def result_columns(fit: FitResult) -> Dict[str, List[str]]:
    return {
        "tau.csv": ["curve"] + [f"tau_{k + 1}" for k in range(fit.n_clusters)],
        "trace.csv": ["iteration", _criterion_name(fit)],
    }


def write_fit(directory: PathLike, curves: CurveSet, fit: FitResult, history: bool = False) -> List[Path]:
    out = run_directory(directory)
    n = fit.posteriors.shape[0]
    columns = result_columns(fit)

    summary = fit_summary(fit)
    summary["csv_columns"] = {"labels.csv": "fitted label, then the curve values", **columns}
    (out / "params.json").write_text(json.dumps(summary, indent=2) + "\n")
    save_csv(CurveSet(values=curves.values, grid=curves.grid, labels=fit.labels), out / "labels.csv")
    _save_table(out / "tau.csv", columns["tau.csv"], np.column_stack([np.arange(1, n + 1), fit.posteriors]))
    _save_table(out / "trace.csv", columns["trace.csv"], np.column_stack([np.arange(len(fit.trace)), fit.trace]))
    save_csv(CurveSet(values=prototypes(curves, fit), grid=curves.grid, labels=np.arange(fit.n_clusters)),
             out / "prototypes.csv")
    written = [out / name for name in ("params.json", "labels.csv", "tau.csv", "trace.csv", "prototypes.csv")]

    segments = segment_table(curves, fit)
    if segments is not None:
        segments.to_csv(out / "segments.csv", index=False)
        written.append(out / "segments.csv")
    if history:
        history_table(fit).to_csv(out / "history.csv", index=False)
        written.append(out / "history.csv")
    logger.info("Wrote %d result files to %s", len(written), out)
    return written


def read_labels(path: PathLike) -> np.ndarray:
    """0-based labels from a ``labels.csv`` result file."""
    return load_csv(path, CsvLayout(grid_header=True, label_column=True)).labels


def read_posteriors(path: PathLike) -> np.ndarray:
    """n x K posterior matrix from ``tau.csv``."""
    return load_csv(path, RESULT_LAYOUT).values[:, 1:]


def read_trace(path: PathLike) -> np.ndarray:
    return load_csv(path, RESULT_LAYOUT).values[:, 1]


def read_model_name(directory: PathLike) -> Optional[str]:
    path = Path(directory) / "params.json"
    if not path.exists():
        return None
    return json.loads(path.read_text()).get("model")


def write_selection(directory: PathLike, grid: SelectionGrid) -> None:
    out = run_directory(directory)
    table = grid.table
    table.to_csv(out / "grid.csv", index=False)
    (out / "grid.txt").write_text(table.drop(columns="message").to_string(index=False) + "\n")
    chosen = grid.chosen
    write_metadata(
        out / "selected.txt",
        {
            "algorithm": grid.algorithm,
            "criterion": grid.criterion,
            "K": chosen.K,
            "R": chosen.R,
            "p": chosen.p,
            "value": chosen.value(grid.criterion),
            "n_free_parameters": chosen.n_params,
        },
    )


def write_evaluation(directory: PathLike, report: EvalReport) -> None:
    out = run_directory(directory)
    frame = report.to_frame()
    frame.to_csv(out / "eval.csv", index=False)
    (out / "eval.txt").write_text(frame.to_string(index=False) + "\n")


def write_sweep(directory: PathLike, frame: pd.DataFrame, summary: pd.DataFrame) -> None:
    out = run_directory(directory)
    frame.to_csv(out / "sweep.csv", index=False)
    summary.to_csv(out / "sweep_summary.csv", index=False)
    (out / "sweep_summary.txt").write_text(summary.to_string(index=False) + "\n")
