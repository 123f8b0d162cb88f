"""Constructive-interference symbol-level precoding.

Barrier-method baseline solvers, the closed-form proximity operators they share
with the deep-unfolded precoding network, and a benchmark harness.
"""

from .model import (
    ComplexChannelSet,
    ModulationSpec,
    QPSK,
    SlpInstance,
    apply_csi_error,
    build_dataset,
    gen_channels,
    make_instance,
    random_symbols,
    read_dataset,
    rotate_and_stack,
    stack_precoder,
    swap_operator,
    unstack,
    write_dataset,
)
from .barriers import (
    BALL,
    HYPERSLAB,
    STRICT,
    HyperslabBounds,
    ProxEval,
    barrier_value,
    forward_backward_step,
    hyperslab_bounds,
    objective_grad_step,
    prox_ball,
    prox_derivatives_check,
    prox_eval,
    prox_hyperslab,
    prox_strict,
    solve_cubic_real,
)
from .solvers import (
    SolveReport,
    SolverOptions,
    complexity_count,
    constraint_residuals,
    solve_blp,
    solve_slp,
    transmit_power,
)
from .network import (
    InstanceBatch,
    SlpDNet,
    TrainConfig,
    batch_from_instances,
    batch_from_tensor,
    infer,
    lagrangian_loss,
    load_checkpoint,
    loss_eval,
    recover_precoder,
    save_checkpoint,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
