"""Simulator and verification toolkit for skeletal decompositions of
supercritical measure-valued branching processes.

Public surface: closed-form mechanism algebra (``mechanism``), the underlying
diffusion (``motion``), deterministic Laplace-equation solvers (``solver``),
event-driven Monte Carlo of the skeleton / superprocess / dressed pair
(``engine``), statistical verification (``verify``) and the command line
front end (``cli``).
"""

from . import cli, engine, families, mechanism, motion, solver, verify
from .engine import AtomicMeasure, DressedState, SimParams
from .exceptions import SksimError
from .families import SpatialFn
from .mechanism import BranchingMechanism, MartingaleFunction, OffspringLaw
from .motion import DomainSpec, Motion
from .solver import SolverField, TestFunction

__version__ = "0.1.0"

__all__ = [
    "AtomicMeasure",
    "BranchingMechanism",
    "DomainSpec",
    "DressedState",
    "MartingaleFunction",
    "Motion",
    "OffspringLaw",
    "SimParams",
    "SksimError",
    "SolverField",
    "SpatialFn",
    "TestFunction",
    "cli",
    "engine",
    "families",
    "mechanism",
    "motion",
    "solver",
    "verify",
]
