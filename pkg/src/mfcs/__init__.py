"""Current sharing among paralleled fuel-cell converters with model-based and data-driven predictive control."""

from .circuit import (ConverterParams, MfcsInput, MfcsState, StateSpaceModel, assemble_continuous, bus_voltage,
                      circulating_current, discretize, steady_state)
from .config import Scenario, load_scenario
from .controllers import (Constraints, ControllerError, CostWeights, DeepcConfig, DeepcController, KMaps,
                          MpcController, NotWarmError)
from .hankel import assemble_predictor, build_hankel, check_persistency
from .metrics import compute_metrics, emit_plot_data
from .qp import QpProblem, QpSolution, QpStatus, solve_qp
from .simulator import (ConstantLoad, Leg, PiecewiseConstantLoad, SimConfig, SimulationError, SineLoad,
                        TrajectoryLog, collect_excitation_data, run_closed_loop)
from .stack import StackDomainError, StackParams, stack_voltage

__version__ = "0.1.0"
