from .engine import (
    DEFAULT_DTYPE,
    NonFiniteError,
    SECOND_ORDER_OPS,
    SecondOrderError,
    ShapeError,
    Tape,
    Tensor,
    affine,
    apply,
    backward,
    concat,
    conv2d,
    current_tape,
    grid_sample_bilinear,
    matmul,
    paused,
    sigmoid,
    softplus,
    tensor,
)
from .gradcheck import grad_check
from .optim import AdamState, adam_init, adam_step
from .serial import (
    canonical_json,
    load_arrays,
    load_meta,
    read_json,
    restore_rng,
    rng_state,
    save_arrays,
    write_json,
)

__all__ = [
    "DEFAULT_DTYPE", "NonFiniteError", "SECOND_ORDER_OPS", "SecondOrderError",
    "ShapeError", "Tape", "Tensor", "affine", "apply", "backward", "concat",
    "conv2d", "current_tape", "grid_sample_bilinear", "matmul", "paused",
    "sigmoid", "softplus", "tensor", "grad_check", "AdamState", "adam_init",
    "adam_step", "canonical_json", "load_arrays", "load_meta", "read_json",
    "restore_rng", "rng_state", "save_arrays", "write_json",
]
