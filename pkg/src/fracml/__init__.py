"""Long-time decay of CM-preserving discretizations of fractional equations."""

__version__ = "0.1.0"

from .quadrature import (CertificationReport, DecayConstants, Scheme, WeightTable,
                         estimate_decay_constants, gl_weights, l1_weights, make_weights,
                         plateau_variation, scaled_sequences, tail_sums, verify_cm_properties)
from .fode import (FastHistory, FodeProblem, FracmlError, NoConvergence, NonpositiveRightSide,
                   Source, Trajectory, history_sum_fast, history_sum_naive, solve, step)
from .barriers import (BarrierError, barrier_pair, check_comparison, check_envelope,
                       check_inequality, continuous_sub, continuous_sup, discrete_sub_homog,
                       discrete_sub_nonhomog, discrete_sup_homog, discrete_sup_nonhomog,
                       suggest_tau)
from .pde import Field, Grid2D, PdeProblem, laplacian_apply, ls_norm, pde_step, solve_pde
from .analysis import DecayReport, decay_index, fit_tail_rate

__all__ = [name for name in dir() if not name.startswith("_")]
