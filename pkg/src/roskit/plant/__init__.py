"""Power-system modeling chain: WTG DAE, equilibrium, linearization,
reduction, SFR coupling, and support quantification."""

from .params import (PlantParameters, SfrParameters, OperatingCondition,
                     load_config)
from .dae import (turbine_torque, residuals, calibrate, solve_equilibrium,
                  ConvergenceError, STATE_NAMES, ALG_NAMES)
from .linearize import (LinearDae, StateSpace, linearize, kron_reduce,
                        dae_frequency_response, ss_frequency_response)
from .reduction import SmaReduction, sma_reduce, participation_factors
from .closed_loop import (ModeGains, MODE_GAINS, ClosedLoopModel,
                          assemble_closed_loop, emulated_inertia,
                          emulated_damping, quantify_support,
                          SupportQuantification, cross_check_inertia,
                          initial_rocof, IllPosedLoopError)

__all__ = [n for n in dir() if not n.startswith("_")]
