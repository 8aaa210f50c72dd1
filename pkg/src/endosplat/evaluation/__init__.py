"""Synthetic ground truth and tracking metrics."""

from .metrics import MetricsReport, delta_avg, evaluate, mte, survival
from .synth import SCRIPTS, SynthScript, SyntheticSequence, generate

__all__ = ["MetricsReport", "SCRIPTS", "SynthScript", "SyntheticSequence", "delta_avg", "evaluate", "generate", "mte", "survival"]
