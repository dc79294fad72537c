"""Adaptive log-ODE solver for rough differential equations with a posteriori error control."""

__version__ = "0.1.0"

from .tensor_algebra import GroupTensor, TruncatedTensor, exp_n, log_n, tensor_inverse, tensor_mul  # noqa: E402
from .rough_path import SampledPath, build_example_path  # noqa: E402
from .vector_field import VectorField, get_field  # noqa: E402
from .log_ode import OdeSolverConfig, log_ode_step, sweep  # noqa: E402
from .error_rep import error_representation  # noqa: E402
from .adaptive import AdaptivePartition, CostModelState, Problem, decide, run_adaptive  # noqa: E402

__all__ = [
    "AdaptivePartition", "CostModelState", "GroupTensor", "OdeSolverConfig", "Problem", "SampledPath",
    "TruncatedTensor", "VectorField", "build_example_path", "decide", "error_representation", "exp_n",
    "get_field", "log_n", "log_ode_step", "run_adaptive", "sweep", "tensor_inverse", "tensor_mul",
]
