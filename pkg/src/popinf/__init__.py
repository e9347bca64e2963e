"""Non-intrusive learning of affine-parametric polynomial reduced-order models."""
from .affine import (AffineStructure, CoeffExpr, TermSpec, Verdict,
                     check_well_posedness, eval_theta_matrix, parse_coeff_expr)
from .dataset import SnapshotSet, load_matrix, save_matrix
from .pod import PodBasis, choose_rank, compute_pod, residual_energy
from .regression import (LogGrid, OperatorMatrix, Regularizer,
                         build_data_matrix, build_regularizer,
                         optimize_hyperparams, solve_regularized,
                         training_error)
from .rom import Rom, integrate, integrate_many, intrusive_rom
from .metrics import ErrorSurface, projection_error, relative_l2_error, summarize

__version__ = "0.1.0"
