"""Calibration-set construction, selection and analysis for long-form summarization."""
from .core import (
    Candidate,
    CandidatePool,
    CalsetError,
    Example,
    ScoreVector,
    SelectedSet,
    StrategyId,
)

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "CandidatePool",
    "CalsetError",
    "Example",
    "ScoreVector",
    "SelectedSet",
    "StrategyId",
]
