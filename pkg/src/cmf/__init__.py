"""CPU matrix factorization.

ALS with batched symmetric Gram assembly, an exact Cholesky route and a
truncated conjugate-gradient route (optionally reading 16-bit Gram
storage), implicit-feedback ALS, and a lock-free parallel SGD baseline.
"""

__version__ = "0.1.0"

from .als import AlsConfig, objective, rmse, train, update_side
from .data import (RatingTriple, SparseRatings, SyntheticTruth, Triples, build,
                   gen_synthetic, load_cache, load_coo, parse_coo, save_cache,
                   save_coo, split_holdout)
from .errors import (CmfError, DataError, DivergenceError, FormatError,
                     NumericalError, ParseError, SingularSystemError)
from .factors import init_factors, load_model, predict_pairs, save_model
from .gram import (GramBatch, GramSystem, TileConfig, assemble_side, get_bias,
                   get_hermitian, pack_half, pack_lower, roofline_estimate,
                   unpack_lower)
from .implicit import (ImplicitConfig, implicit_objective, implicit_train,
                       implicit_update_side, mean_percentile_rank,
                       precompute_gram, preference_rmse)
from .parallel import get_workers, set_workers
from .report import EpochRecord, PhaseTimes, TrainReport
from .sgd import SgdConfig, sgd_epoch, sgd_step, sgd_train
from .solvers import (BatchSolveResult, SolverConfig, batch_solve, cg_solve,
                      cg_solve_half, exact_solve)

__all__ = [name for name in dir() if not name.startswith("_")]
