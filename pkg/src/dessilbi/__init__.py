"""DessiLBI: split linearized Bregman iteration for training sparse networks."""
from .errors import (ArgumentError, ContractError, DessiError, DimensionError, FormatError,
                     NotFoundError, NumericError, StructuralError)
from .network import LayerSpec, NetworkSpec, backward, evaluate, forward, init_params
from .optimizer import (CoupledState, OptimizerConfig, dessilbi_step, dessilbi_step_momentum,
                        dessilbi_step_scaled, init_state, lbi_reformulated_step, max_step_size,
                        mda_step, sgd_step)
from .penalty import PenaltySpec, bregman, omega_value, prox, recover_subgradient

__version__ = "0.1.0"
