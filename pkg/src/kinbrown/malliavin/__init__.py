from .control import (ControlFunctions, ControlSolution, MalliavinMatrix,
                      SingularMatrix, control_functions, control_residual,
                      inverse, malliavin_derivative, matrix_gram,
                      matrix_reduced, renormalize, singular_mask,
                      solve_control, unit_gram)
from .dual import (DualEvaluation, DualPieces, FDSensitivityWarning, basis_columns,
                   basis_reassemble, control_coefficients,
                   dual_basis_truncated, dual_direct, dual_explicit,
                   dual_pieces, dual_rows, v_T)
from .limits import (LimitSample, RenormalizedSample, inverse_moment_probe,
                     limit_batch, renormalized_scan, sample_limit,
                     sample_limit_G, sample_limit_N)
