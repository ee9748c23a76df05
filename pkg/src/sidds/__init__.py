"""Sparse identification of dynamics with simultaneous denoising."""

from .basis import BasisSpec, Coefficients, enumerate_basis, eval_basis, grad_basis_contract, linear_basis
from .crlb import crlb_bound, sidds_asymptotics, tangent_basis
from .findiff import FinDiffMatrix, make_findiff, make_second_diff
from .integrate import Trajectory, VectorField, integrate_sensitivities, integrate_trajectory
from .lsoi import lsoi_asymptotics, lsoi_solve, weighted_lsoi_solve
from .noise import NoiseModel, WeightMatrix, oversample, sample_noise
from .solver import SiddsProblem, SolverOptions, sidds_solve

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "Coefficients",
    "enumerate_basis",
    "eval_basis",
    "grad_basis_contract",
    "linear_basis",
    "crlb_bound",
    "sidds_asymptotics",
    "tangent_basis",
    "FinDiffMatrix",
    "make_findiff",
    "make_second_diff",
    "Trajectory",
    "VectorField",
    "integrate_sensitivities",
    "integrate_trajectory",
    "lsoi_asymptotics",
    "lsoi_solve",
    "weighted_lsoi_solve",
    "NoiseModel",
    "WeightMatrix",
    "oversample",
    "sample_noise",
    "SiddsProblem",
    "SolverOptions",
    "sidds_solve",
]
