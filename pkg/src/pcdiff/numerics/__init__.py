from . import checkpoint
from .checkpoint import CheckpointError, dumps, load, loads, save
from .gradcheck import GradCheckResult, grad_check, grad_check_report
from .optim import OptimizerState, optimizer_step
from .rng import RngStreams
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    gather,
    matmul,
    max_pool,
    mean,
    mean_pool,
    mul,
    no_grad,
    precision,
    record_kinks,
    replay_kinks,
    relu,
    reshape,
    scatter_add,
    sigmoid,
    slice_last,
    softmax,
    split_last,
    sub,
    sum,
    transpose,
    weighted_rows,
)
