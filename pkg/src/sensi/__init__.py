"""Sensitivity analysis for matched observational studies with several outcomes."""

__version__ = "0.1.0"

from .design import (ColumnSchema, DesignError, HypothesisSpec, MatchedDesign,  # noqa: E402
                     apply_hypothesis, load_design)
from .minimax import MinimaxProblem, MinimaxSolution, solve_minimax  # noqa: E402
from .multiplicity import closed_testing, gamma_star, holm_combine  # noqa: E402
from .statistics import ScoreMatrix, score_matrix  # noqa: E402

__all__ = [
    "__version__", "ColumnSchema", "DesignError", "HypothesisSpec", "MatchedDesign",
    "apply_hypothesis", "load_design", "MinimaxProblem", "MinimaxSolution", "solve_minimax",
    "closed_testing", "gamma_star", "holm_combine", "ScoreMatrix", "score_matrix",
]
