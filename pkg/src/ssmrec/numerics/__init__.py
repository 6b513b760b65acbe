"""Array substrate: tensors, reverse-mode tape, seeded RNG, gradient checking."""

from .gradcheck import grad_check, numeric_gradient
from .rng import derive_seed, make_rng, xavier_normal_init, xavier_std
from .tensor import TRACKER, MemoryTracker, Tape, Tensor, parameter, peak_bytes, record, reset_peak

__all__ = [
    "TRACKER",
    "MemoryTracker",
    "Tape",
    "Tensor",
    "derive_seed",
    "grad_check",
    "make_rng",
    "numeric_gradient",
    "parameter",
    "peak_bytes",
    "record",
    "reset_peak",
    "xavier_normal_init",
    "xavier_std",
]
