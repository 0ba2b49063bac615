"""Spectral Galerkin simulation of parabolic SPDEs with Malliavin diagnostics."""

__version__ = "0.1.0"

from .spectral import SpectralModel, Collocation, kernel_norm_sq, kernel_norm_profile, check_condition_88, c_x
from .noise import NoiseGrid, generate, generate_batch, bump
from .solver import (
    DivergenceError,
    DiffusionSpec,
    DriftSpec,
    SolverConfig,
    Trajectory,
    sigma_preset,
    solve,
    solve_batch,
    solve_picard,
    solve_random_field,
    stopping_step,
    truncate_drift,
)
from .malliavin import propagate_tangent, h_norm_sq, windowed_scaling, finite_difference_tangent
from .density import MonteCarloSetup, collect, kde, atom_test, nondegeneracy_curve, compare_to_reference

__all__ = [n for n in dir() if not n.startswith("_")]
