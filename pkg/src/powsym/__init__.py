"""Symmetry-reduction pricing engine for power options with time-dependent
volatility, interest rate and dividend yield."""

from .coefficients import CoefficientCurve
from .model import MarketScenario, payoff, pde_residual, xyz_coefficients
from .oracles import bs_reference, fd_price, martingale_diagnostic, mc_price
from .reduction import Branch, ReductionPipeline, price
from .symmetry import (
    SymmetryConstants,
    SymmetryFunctions,
    backend_consistency,
    closed_form_symmetry,
    determining_residuals,
    generator_characteristic,
    normalized_determining_residuals,
    solve_symmetry_ode,
    verify_generator,
)

__version__ = "0.1.0"

__all__ = [
    "Branch",
    "CoefficientCurve",
    "MarketScenario",
    "ReductionPipeline",
    "SymmetryConstants",
    "SymmetryFunctions",
    "backend_consistency",
    "bs_reference",
    "closed_form_symmetry",
    "determining_residuals",
    "fd_price",
    "generator_characteristic",
    "martingale_diagnostic",
    "mc_price",
    "normalized_determining_residuals",
    "payoff",
    "pde_residual",
    "price",
    "solve_symmetry_ode",
    "verify_generator",
    "xyz_coefficients",
]
