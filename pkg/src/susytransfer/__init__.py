"""Spectral toolkit for stochastic flows on differential forms.

Builds the generalized Fokker-Planck operator H = L_F - T sum_a L_{e_a}^2 on
truncated form bases over tori (Fourier) and the line (staggered grid),
decomposes it per degree, and analyses the spectrum for topological
supersymmetry breaking.  Deterministic fixed-point traces and an SDE Monte
Carlo oracle complement the spectral side.
"""
from .forms import KFormVector, Line, Torus, make_basis
from .geometry import TrigPolyField
from .operators import GradedOperator, OperatorSet, assemble_H_ito, assemble_H_strat, exterior_derivative
from .spectra import Spectrum, eigendecompose, zero_modes
from .analysis import SusyReport, classify, witten_index
from .scenario import Scenario, parse_scenario

__all__ = [
    "KFormVector", "Line", "Torus", "make_basis", "TrigPolyField", "GradedOperator", "OperatorSet",
    "assemble_H_ito", "assemble_H_strat", "exterior_derivative", "Spectrum", "eigendecompose", "zero_modes",
    "SusyReport", "classify", "witten_index", "Scenario", "parse_scenario",
]
