"""Matrix-free natural-gradient optimization for feed-forward networks."""

from .core import LinearOperator, MatrixOperator, ParamLayout, dot, axpy, norm2, make_rng
from .metric import (
    MetricOperator,
    OutputModel,
    explicit_fisher,
    gn_vec_preactivation,
    linear_gaussian,
    mc_fisher,
    metric_vec,
    score_mean,
    sigmoid_bernoulli,
    softmax_multinomial,
)
from .model import (
    Batch,
    Mlp,
    forward,
    gradient,
    init_mlp,
    load_mlp,
    lop_output,
    lop_preactivation,
    loss,
    rop_output,
    rop_preactivation,
    save_mlp,
)
from .optim import (
    NcgState,
    NgdState,
    StepReport,
    lm_update,
    line_search_backtracking,
    ncg_step,
    ngd_step,
    reduction_ratio,
    sgd_step,
)
from .solver import SolverConfig, SolverResult, Termination, cg_solve

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
