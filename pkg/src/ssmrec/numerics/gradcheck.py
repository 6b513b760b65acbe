from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import EvaluationError, ParameterError
from .tensor import Tape, Tensor

# central-difference stencils as (offset in units of eps, weight on f(+o) - f(-o));
# differencing symmetric pairs first keeps a constant function at exactly zero
_STENCILS = {
    2: ((1, 0.5),),
    4: ((1, 8 / 12), (2, -1 / 12)),
}


def _evaluate(f: Callable[[], Tensor]) -> float:
    value = f()
    value = float(value.data) if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise EvaluationError(f"grad_check: function value is not finite ({value})")
    return value


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, eps: float, order: int = 2) -> np.ndarray:
    stencil = _STENCILS[order]
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    if not np.shares_memory(flat, param.data):
        raise ParameterError("grad_check needs contiguous parameter arrays")
    for i in range(flat.size):
        orig = flat[i]
        acc = 0.0
        for off, w in stencil:
            flat[i] = orig + off * eps
            hi = _evaluate(f)
            flat[i] = orig - off * eps
            acc += w * (hi - _evaluate(f))
        flat[i] = orig
        grad.reshape(-1)[i] = acc / eps
    return grad


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    order: int = 2,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and closes over ``params``, whose buffers are
    perturbed in place during the check and restored afterwards. The error
    for one element is ``|a - n| / max(|a|, |n|, 1e-8)``. ``order=4`` uses the
    five-point stencil, which tolerates a larger ``eps`` and so suffers less
    round-off on composite functions.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if order not in _STENCILS:
        raise ParameterError(f"unsupported stencil order {order}")
    with Tape() as tape:
        value = f()
    if not np.all(np.isfinite(value.data)):
        raise EvaluationError("grad_check: function value is not finite")
    analytic = tape.gradient(value, list(params))
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_gradient(f, p, eps, order)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        err = np.abs(a - n) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
