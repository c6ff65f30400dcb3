"""Reverse-mode automatic differentiation over numpy arrays."""

from core_engine.autodiff.tape import (
    DiffValue,
    GradientReport,
    Tape,
    backward,
    evaluate,
    lift,
    record,
    value_of,
)
from core_engine.autodiff.gradcheck import GradientCheckReport, check_gradients

__all__ = [
    "DiffValue",
    "GradientReport",
    "GradientCheckReport",
    "Tape",
    "backward",
    "check_gradients",
    "evaluate",
    "lift",
    "record",
    "value_of",
]
