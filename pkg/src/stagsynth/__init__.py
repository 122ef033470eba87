"""Synthetic control weights and prediction intervals for staggered adoption panels."""

from __future__ import annotations

from .config import ConstraintSpec, CovariateSpec, PredictandSpec, StudyConfig
from .errors import StagsynthError
from .panel import PanelDataset, build_design, load_panel
from .pipeline import run_intervals
from .uncertainty import PredictionInterval

__all__ = [
    "ConstraintSpec",
    "CovariateSpec",
    "PanelDataset",
    "PredictandSpec",
    "PredictionInterval",
    "StagsynthError",
    "StudyConfig",
    "build_design",
    "load_panel",
    "run_intervals",
]

__version__ = "0.1.0"
