"""Turnpike steady states and long-horizon optimal control solvers."""

from .lq_core import LqProblem, lq_bvp_closed_form, lq_turnpike, split
from .ocp_model import ControlProblem, FixedConstrained, FixedFixed, FixedFree, Periodic, StaticExtremal
from .trajectory import Trajectory

__version__ = "0.1.0"

__all__ = [
    "ControlProblem",
    "FixedConstrained",
    "FixedFixed",
    "FixedFree",
    "LqProblem",
    "Periodic",
    "StaticExtremal",
    "Trajectory",
    "lq_bvp_closed_form",
    "lq_turnpike",
    "split",
]
