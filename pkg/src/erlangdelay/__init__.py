"""Erlang mixture approximation of distributed-delay differential equations.

Kernels are approximated by Erlang mixtures, after which the linear chain
trick turns the delay system into ordinary differential equations that can
be simulated and linearized with standard tools.  Reference Euler solvers
for the delay equations themselves are included for comparison.
"""

__version__ = "0.1.0"

from .kernels import ErlangMixture, KernelSpec, make_kernel  # noqa: E402
from .approx import FitProblem, find_horizon, fit_least_squares, fit_theoretical, kernel_error  # noqa: E402
from .lct import LctOde, ModelSpec, build_lct  # noqa: E402
from .integrate import IntegratorConfig, Trajectory, solve_explicit, solve_implicit  # noqa: E402
from .ddesolve import dde_explicit, dde_implicit  # noqa: E402
from .models import build_model, fission_model, logistic_model, manufactured_logistic  # noqa: E402

__all__ = [
    "ErlangMixture", "KernelSpec", "make_kernel",
    "FitProblem", "find_horizon", "fit_least_squares", "fit_theoretical", "kernel_error",
    "LctOde", "ModelSpec", "build_lct",
    "IntegratorConfig", "Trajectory", "solve_explicit", "solve_implicit",
    "dde_explicit", "dde_implicit",
    "build_model", "fission_model", "logistic_model", "manufactured_logistic",
]
