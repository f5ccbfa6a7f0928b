"""Shifted Benjamini-Hochberg procedures for correlated two-sided Gaussian tests.

The package covers the survival kernels, correlation structures and shift
profiles, the calibrated shifted step-up procedures, knockoff-assisted
variable selection and a reproducible Monte Carlo harness.
"""
from .corr import CorrelationMatrix, ShiftProfile, StructureSpec, TauRule, make_correlation, select_tau, tau_profile
from .dist import CHISQ1, DistributionKind, scaled_f
from .harness import ExperimentConfig, Regime, lemma1_oracle, run_experiment
from .procedures import bh, by, gsbh, run_procedure, sbh1, sbh2, step_up
from .regression import run_paired_procedure, sbbh

__version__ = "0.1.0"

__all__ = [
    "CHISQ1",
    "CorrelationMatrix",
    "DistributionKind",
    "ExperimentConfig",
    "Regime",
    "ShiftProfile",
    "StructureSpec",
    "TauRule",
    "bh",
    "by",
    "gsbh",
    "lemma1_oracle",
    "make_correlation",
    "run_experiment",
    "run_paired_procedure",
    "run_procedure",
    "sbbh",
    "sbh1",
    "sbh2",
    "scaled_f",
    "select_tau",
    "step_up",
    "tau_profile",
]
