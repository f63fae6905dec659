"""Command-line entry point: ``curvemix {generate,fit,select,evaluate,sweep}``.

Exit codes: 0 on success, 2 for invalid input or settings, 3 when fitting fails
numerically after every restart.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Union

from pydantic import ValidationError

from curvemix import __version__
from curvemix.config import Config, FitConfig
from curvemix.dataset import (
    CsvLayout,
    CurveSet,
    SimulationSpec,
    generate,
    load_csv,
    save_csv,
    table1_spec,
    write_metadata,
)
from curvemix.errors import (
    EquivalenceViolation,
    FitFailed,
    InfeasibleSegmentation,
    InvalidData,
    ParseError,
    SelectionFailed,
    SingularSegment,
)
from curvemix.metrics import SweepSettings, evaluate_labels, noise_sweep, summarize_sweep
from curvemix.mixture import ModelKind
from curvemix.reporting import (
    RunManifest,
    read_labels,
    read_model_name,
    run_directory,
    write_evaluation,
    write_fit,
    write_selection,
    write_sweep,
)
from curvemix.selection import GridRanges, fit_model, select_model

logger = logging.getLogger("curvemix.cli")

MODELS = [kind.value for kind in ModelKind]

# ValueError covers unknown model names and malformed option values
USER_ERRORS = (InvalidData, ParseError, InfeasibleSegmentation, ValidationError, ValueError, OSError)
NUMERICAL_ERRORS = (FitFailed, SelectionFailed, SingularSegment, EquivalenceViolation)


def _regimes(text: str) -> Union[int, List[int]]:
    values = [int(v) for v in text.split(",")]
    return values[0] if len(values) == 1 else values


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _default_degree(model: str, degree: Optional[int]) -> int:
    if degree is not None:
        return degree
    return 0 if ModelKind(model).family in ("kmeans", "gmm") else 1


def _add_layout_options(parser: argparse.ArgumentParser) -> None:
    layout = parser.add_argument_group("input layout", "detected from the file when not given")
    layout.add_argument("--grid-header", action=argparse.BooleanOptionalAction, default=None,
                        help="first row is the #grid time grid")
    layout.add_argument("--label-column", action=argparse.BooleanOptionalAction, default=None,
                        help="first column holds 1-based cluster labels")


def _read_curves(path: Path, args: argparse.Namespace) -> CurveSet:
    declared = {key: getattr(args, key) for key in ("grid_header", "label_column") if getattr(args, key) is not None}
    layout = CsvLayout.sniff(path).model_copy(update=declared) if declared else None
    return load_csv(path, layout)


def _add_fit_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--restarts", type=int, default=Config.N_RESTARTS)
    parser.add_argument("--tol", type=float, default=Config.TOL)
    parser.add_argument("--max-iter", type=int, default=Config.MAX_ITER)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--covariance", choices=["diag", "spherical"], default="diag")
    parser.add_argument("--segmentation-init", choices=["uniform", "random", "optimal"], default="random")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=Config.THREADS, help="parallel restarts / grid cells")
    common.add_argument("--log-level", default=Config.LOG_LEVEL)

    parser = argparse.ArgumentParser(prog="curvemix", description="Curve clustering with piecewise regression mixtures")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("generate", parents=[common], help="simulate a labelled curve set")
    source = gen.add_mutually_exclusive_group(required=True)
    source.add_argument("--table1", action="store_true", help="two clusters of five piecewise-linear regimes")
    source.add_argument("--spec", type=Path, help="JSON simulation spec")
    gen.add_argument("--noise-shift", type=float, default=0.0)
    gen.add_argument("--unbalanced", action="store_true")
    gen.add_argument("--n", type=int, default=100)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("-o", "--out", type=Path, required=True)
    gen.set_defaults(handler=cmd_generate)

    fit = commands.add_parser("fit", parents=[common], help="fit one model")
    fit.add_argument("--model", choices=MODELS, required=True)
    fit.add_argument("--K", type=int, default=2)
    fit.add_argument("--R", type=_regimes, default=1, help="shared R or one value per cluster, comma separated")
    fit.add_argument("--p", type=int, default=None)
    fit.add_argument("--constrained", action="store_true", help="pooled variance and equal proportions")
    fit.add_argument("--history", action="store_true", help="also write history.csv")
    fit.add_argument("--input", type=Path, required=True)
    fit.add_argument("-o", "--out", type=Path, required=True)
    _add_fit_options(fit)
    _add_layout_options(fit)
    fit.set_defaults(handler=cmd_fit)

    sel = commands.add_parser("select", parents=[common], help="BIC / ICL selection over a (K, R, p) grid")
    sel.add_argument("--model", choices=MODELS, default="pwrm-cem")
    sel.add_argument("--grid", default="1..4,1..6,0..3", help="Kmin..Kmax,Rmin..Rmax,pmin..pmax")
    sel.add_argument("--criterion", choices=["bic", "icl"], default="icl")
    sel.add_argument("--input", type=Path, required=True)
    sel.add_argument("-o", "--out", type=Path, required=True)
    _add_fit_options(sel)
    _add_layout_options(sel)
    sel.set_defaults(handler=cmd_select)

    ev = commands.add_parser("evaluate", parents=[common], help="score a fit against true labels")
    ev.add_argument("--fit", type=Path, required=True, help="output directory of a fit run")
    ev.add_argument("--truth", type=Path, required=True, help="labelled curve CSV")
    ev.add_argument("-o", "--out", type=Path, default=None)
    _add_layout_options(ev)
    ev.set_defaults(handler=cmd_evaluate)

    sw = commands.add_parser("sweep", parents=[common], help="misclassification against noise level")
    sw.add_argument("--noise-levels", type=_floats, default=[0.0, 0.5, 1.0, 1.5])
    sw.add_argument("--datasets", type=int, default=10)
    sw.add_argument("--algorithms", default="pwrm-em,pwrm-cem,kmeans,prm-em,gmm-em")
    sw.add_argument("--K", type=int, default=2)
    sw.add_argument("--R", type=int, default=5)
    sw.add_argument("--p", type=int, default=1)
    sw.add_argument("--prm-degree", type=int, default=10)
    sw.add_argument("--unbalanced", action="store_true")
    sw.add_argument("--n", type=int, default=100)
    sw.add_argument("-o", "--out", type=Path, required=True)
    _add_fit_options(sw)
    sw.set_defaults(handler=cmd_sweep)
    return parser


def _base_config(args: argparse.Namespace, **overrides) -> FitConfig:
    return FitConfig(
        n_restarts=args.restarts,
        tol=args.tol,
        max_iter=args.max_iter,
        seed=args.seed,
        covariance=args.covariance,
        segmentation_init=args.segmentation_init,
        n_jobs=args.threads,
        **overrides,
    )


def cmd_generate(args: argparse.Namespace) -> int:
    manifest = RunManifest.start("generate", args.seed, inputs=[args.spec] if args.spec else [])
    if args.spec:
        spec = SimulationSpec.model_validate_json(args.spec.read_text())
        if args.seed is not None:
            spec = spec.model_copy(update={"seed": args.seed})
    else:
        spec = table1_spec(
            noise_shift=args.noise_shift, unbalanced=args.unbalanced, n=args.n, seed=args.seed or 0
        )
    curves = generate(spec)
    out = run_directory(args.out)
    save_csv(curves, out / "curves.csv")
    write_metadata(out / "curves.meta", {"spec": spec.model_dump(), "label_base": 1})
    manifest.seed = spec.seed
    manifest.write(out, {"table1": args.table1, "noise_shift": args.noise_shift, "unbalanced": args.unbalanced,
                         "n": spec.n, "m": spec.m})
    logger.info("Generated %d curves into %s", curves.n_curves, out)
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    manifest = RunManifest.start("fit", args.seed, inputs=[args.input])
    curves = _read_curves(args.input, args)
    overrides = {"n_clusters": args.K, "n_regimes": args.R, "degree": _default_degree(args.model, args.p),
                 "record_history": args.history}
    if args.constrained:
        overrides.update(pooled_variance=True, fixed_proportions=True)
    config = _base_config(args, **overrides)
    fit = fit_model(curves, args.model, config)
    write_fit(args.out, curves, fit, history=args.history)
    manifest.write(args.out, {"model": args.model, **config.model_dump()})
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    manifest = RunManifest.start("select", args.seed, inputs=[args.input])
    curves = _read_curves(args.input, args)
    config = _base_config(args)
    grid = select_model(curves, GridRanges.parse(args.grid), args.model, config, criterion=args.criterion)
    write_selection(args.out, grid)
    manifest.write(args.out, {"model": args.model, "grid": args.grid, "criterion": args.criterion,
                              **config.model_dump()})
    chosen = grid.chosen
    print(f"selected K={chosen.K} R={chosen.R} p={chosen.p} ({args.criterion.upper()}={chosen.value(args.criterion):.4f})")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    labels_path = args.fit / "labels.csv"
    prototypes_path = args.fit / "prototypes.csv"
    manifest = RunManifest.start("evaluate", None, inputs=[labels_path, prototypes_path, args.truth])
    truth = _read_curves(args.truth, args)
    if truth.labels is None:
        raise InvalidData(f"{args.truth} carries no labels")
    estimated = read_labels(labels_path)
    if estimated.size != truth.n_curves:
        raise InvalidData(f"{estimated.size} fitted labels for {truth.n_curves} curves")
    protos = load_csv(prototypes_path)
    report = evaluate_labels(truth.values, truth.labels, estimated, protos.values, read_model_name(args.fit))
    out = args.out or args.fit / "evaluation"
    write_evaluation(out, report)
    manifest.write(out, {"fit": str(args.fit), "truth": str(args.truth)})
    print(report.to_frame().to_string(index=False))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    manifest = RunManifest.start("sweep", args.seed)
    algorithms = tuple(a.strip() for a in args.algorithms.split(",") if a.strip())
    for algorithm in algorithms:
        ModelKind(algorithm)
    settings = SweepSettings(
        shifts=tuple(args.noise_levels),
        n_datasets=args.datasets,
        algorithms=algorithms,
        n_clusters=args.K,
        n_regimes=args.R,
        degree=args.p,
        prm_degree=args.prm_degree,
        unbalanced=args.unbalanced,
        n_curves=args.n,
        seed=args.seed,
        base=_base_config(args),
    )
    frame = noise_sweep(settings)
    summary = summarize_sweep(frame)
    write_sweep(args.out, frame, summary)
    manifest.write(args.out, {"noise_levels": list(settings.shifts), "datasets": settings.n_datasets,
                              "algorithms": list(algorithms), "K": args.K, "R": args.R, "p": args.p,
                              "prm_degree": args.prm_degree, "unbalanced": args.unbalanced, "n": args.n,
                              **settings.base.model_dump()})
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except USER_ERRORS as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"curvemix {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        logger.error("%s failed after all restarts: %s", args.command, exc)
        print(f"curvemix {args.command}: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
