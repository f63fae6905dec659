from __future__ import annotations

from typing import Optional, Sequence


class CurveMixError(Exception):
    """Base class for every error raised by curvemix."""


class ParseError(CurveMixError):
    def __init__(self, message: str, row: Optional[int] = None, col: Optional[int] = None):
        location = []
        if row is not None:
            location.append(f"row={row}")
        if col is not None:
            location.append(f"col={col}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")
        self.row = row
        self.col = col


class InvalidData(CurveMixError):
    pass


class InfeasibleSegmentation(CurveMixError):
    pass


class SingularSegment(CurveMixError):
    pass


class EmptyCluster(CurveMixError):
    def __init__(self, clusters: Sequence[int]):
        self.clusters = list(clusters)
        super().__init__(f"clusters with no posterior mass: {self.clusters}")


class FitFailed(CurveMixError):
    def __init__(self, message: str, diagnostics: Sequence[str] = ()):
        self.diagnostics = list(diagnostics)
        details = "; ".join(self.diagnostics)
        super().__init__(f"{message}: {details}" if details else message)


class EquivalenceViolation(CurveMixError):
    def __init__(self, iteration: int, reason: str):
        self.iteration = iteration
        self.reason = reason
        super().__init__(f"trajectories diverge at iteration {iteration}: {reason}")


class SelectionFailed(CurveMixError):
    pass
