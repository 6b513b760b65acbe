"""Selective state-space block.

Shapes use ``L`` for time, ``D`` for the inner channel count and ``N`` for the
per-channel state size. The continuous system ``h' = A h + B x`` is
discretised per step with ``a_bar = exp(delta * A)`` and the Euler input rule
``b_bar = delta * B``, giving the linear recurrence

    h_t = a_bar_t * h_{t-1} + b_bar_t * x_t,     y_t = sum_n c_t[n] * h_t[n]

evaluated either sequentially or with a work-efficient associative scan.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import EvaluationError, InvariantError, ShapeError
from .numerics import ops
from .numerics.rng import make_rng, xavier_normal_init
from .numerics.tensor import TRACKER, Tensor, parameter, record

MODES = ("recurrent", "parallel")


@dataclass
class ScanInputs:
    a_bar: np.ndarray  # [L, D, N]
    bx: np.ndarray  # [L, D, N]
    c: np.ndarray  # [L, D, N]

    def __post_init__(self):
        if not (self.a_bar.shape == self.bx.shape == self.c.shape) or self.a_bar.ndim != 3:
            raise ShapeError(
                f"ScanInputs need three equal [L, D, N] arrays, got "
                f"{self.a_bar.shape}, {self.bx.shape}, {self.c.shape}"
            )


@dataclass
class SsmBlockParams:
    in_proj: Tensor  # [d_model, 2 * d_inner]
    conv_kernel: Tensor  # [d_inner, W]
    A_log: Tensor  # [d_inner, N]
    delta_proj: Tensor  # [d_inner, 1]
    delta_bias: Tensor  # [d_inner]
    B_proj: Tensor  # [d_inner, N]
    C_proj: Tensor  # [d_inner, N]
    D_skip: Tensor  # [d_inner]
    out_proj: Tensor  # [d_inner, d_model]

    def __post_init__(self):
        d_model, two_inner = self.in_proj.shape
        d_inner, n = self.d_inner, self.d_state
        expected = {
            "in_proj": (d_model, 2 * d_inner),
            "conv_kernel": (d_inner, self.conv_kernel.shape[1]),
            "A_log": (d_inner, n),
            "delta_proj": (d_inner, 1),
            "delta_bias": (d_inner,),
            "B_proj": (d_inner, n),
            "C_proj": (d_inner, n),
            "D_skip": (d_inner,),
            "out_proj": (d_inner, d_model),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"SsmBlockParams.{name}: expected {shape}, got {got}")

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[0]

    @property
    def d_inner(self) -> int:
        return self.in_proj.shape[1] // 2

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def conv_width(self) -> int:
        return self.conv_kernel.shape[1]

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_ssm_params(
    d_model: int,
    expand: int = 2,
    d_state: int = 16,
    conv_width: int = 4,
    rng=0,
    dtype=np.float64,
    dt_min: float = 1e-3,
    dt_max: float = 1e-1,
) -> SsmBlockParams:
    """Xavier-normal projections, S4D-real ``A`` and log-uniform step sizes."""
    rng = make_rng(rng)
    d_inner = expand * d_model
    a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
    return SsmBlockParams(
        in_proj=parameter(xavier_normal_init(d_model, 2 * d_inner, rng, dtype), "in_proj"),
        conv_kernel=parameter(
            xavier_normal_init(conv_width, 1, rng, dtype, shape=(d_inner, conv_width)), "conv_kernel"
        ),
        A_log=parameter(a_log.astype(dtype), "A_log"),
        delta_proj=parameter(xavier_normal_init(d_inner, 1, rng, dtype), "delta_proj"),
        delta_bias=parameter(inverse_softplus(dt).astype(dtype), "delta_bias"),
        B_proj=parameter(xavier_normal_init(d_inner, d_state, rng, dtype), "B_proj"),
        C_proj=parameter(xavier_normal_init(d_inner, d_state, rng, dtype), "C_proj"),
        D_skip=parameter(np.ones(d_inner, dtype=dtype), "D_skip"),
        out_proj=parameter(xavier_normal_init(d_inner, d_model, rng, dtype), "out_proj"),
    )


# ---------------------------------------------------------------- selection / discretisation

def select_params(x: Tensor, params: SsmBlockParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent step size ``delta`` [.., L, D] and ``b``, ``c`` [.., L, N]."""
    if x.shape[-1] != params.d_inner:
        raise ShapeError(f"select_params: input {x.shape} vs d_inner={params.d_inner}")
    delta = ops.softplus(ops.add(ops.matmul(x, params.delta_proj), params.delta_bias))
    b = ops.matmul(x, params.B_proj)
    c = ops.matmul(x, params.C_proj)
    return delta, b, c


def _discretize(delta, a, b, x):
    """Broadcast discretisation on raw arrays; ``delta``/``x`` [.., D], ``b`` [.., N]."""
    a_bar = np.exp(delta[..., :, None] * a)
    bx = (delta * x)[..., :, None] * b[..., None, :]
    return a_bar, bx


def discretize_zoh(a: np.ndarray, delta: np.ndarray, b: np.ndarray, x: np.ndarray,
                   c: np.ndarray | None = None) -> ScanInputs:
    """Per-step coefficients for an unbatched sequence.

    ``a`` [D, N] must be strictly negative; ``delta`` and ``x`` are [L, D],
    ``b`` (and ``c`` if given) are [L, N]. ``c`` is broadcast to [L, D, N].
    """
    a = np.asarray(a)
    delta = np.asarray(delta)
    if np.any(a >= 0):
        raise InvariantError("discretize_zoh: A must be strictly negative")
    if np.any(delta < 0):
        raise InvariantError("discretize_zoh: delta must be non-negative")
    L, D = delta.shape
    N = a.shape[1]
    if a.shape[0] != D or np.shape(x) != (L, D) or np.shape(b) != (L, N):
        raise ShapeError(
            f"discretize_zoh: a {a.shape}, delta {delta.shape}, b {np.shape(b)}, x {np.shape(x)}"
        )
    a_bar, bx = _discretize(delta, a, np.asarray(b), np.asarray(x))
    if c is None:
        c_full = np.zeros_like(a_bar)
    else:
        c_full = np.broadcast_to(np.asarray(c)[:, None, :], a_bar.shape).copy()
    return ScanInputs(a_bar, bx, c_full)


# ---------------------------------------------------------------- scans

def linear_scan_sequential(a: np.ndarray, b: np.ndarray, h0=None, axis: int = 0) -> np.ndarray:
    """All states of ``h_t = a_t h_{t-1} + b_t`` along ``axis``, one step at a time."""
    a = np.moveaxis(a, axis, 0)
    b = np.moveaxis(b, axis, 0)
    h = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
    prev = np.zeros(h.shape[1:], dtype=h.dtype) if h0 is None else h0
    for t in range(h.shape[0]):
        prev = a[t] * prev + b[t]
        h[t] = prev
    return np.moveaxis(h, 0, axis)


def linear_scan_blelloch(a: np.ndarray, b: np.ndarray, h0=None, axis: int = 0) -> np.ndarray:
    """Same result as :func:`linear_scan_sequential` by a work-efficient scan.

    Elements are pairs ``(a, b)`` combined as ``(a2, b2) o (a1, b1) =
    (a2 a1, a2 b1 + b2)`` (``1`` earlier than ``2``) with identity ``(1, 0)``.
    An up-sweep builds subtree products, a down-sweep turns them into
    exclusive prefixes, and one final combine makes them inclusive: O(T) work
    and O(log T) depth over time.
    """
    a = np.moveaxis(a, axis, 0)
    b = np.moveaxis(b, axis, 0)
    T = a.shape[0]
    rest = np.broadcast_shapes(a.shape[1:], b.shape[1:])
    dtype = np.result_type(a, b)
    P = 1 << max(0, (T - 1).bit_length())
    itemsize = np.dtype(dtype).itemsize
    with TRACKER.scratch(2 * P * int(np.prod(rest)) * itemsize):
        A = np.ones((P,) + rest, dtype=dtype)
        Bv = np.zeros((P,) + rest, dtype=dtype)
        A[:T] = a
        Bv[:T] = b
        if h0 is not None:
            Bv[0] += A[0] * h0
        stride = 1
        while stride < P:
            left = slice(stride - 1, P, 2 * stride)
            right = slice(2 * stride - 1, P, 2 * stride)
            Bv[right] += A[right] * Bv[left]
            A[right] *= A[left]
            stride *= 2
        A[P - 1] = 1
        Bv[P - 1] = 0
        stride = P // 2
        while stride >= 1:
            left = slice(stride - 1, P, 2 * stride)
            right = slice(2 * stride - 1, P, 2 * stride)
            ta = A[left].copy()
            tb = Bv[left].copy()
            A[left] = A[right]
            Bv[left] = Bv[right]
            # prefix over the left subtree: left subtree applied after the old prefix
            Bv[right] = ta * Bv[right] + tb
            A[right] *= ta
            stride //= 2
        h = a * Bv[:T] + b
        if h0 is not None:
            # Bv[0] held the seeded state; the exclusive prefix at t=0 is the identity
            h[0] = a[0] * h0 + b[0]
    return np.moveaxis(h, 0, axis)


def scan_recurrent(s: ScanInputs) -> np.ndarray:
    """y [L, D] by the plain recurrence with constant state memory."""
    L, D, N = s.a_bar.shape
    y = np.empty((L, D), dtype=np.result_type(s.a_bar, s.bx))
    h = np.zeros((D, N), dtype=y.dtype)
    for t in range(L):
        h = s.a_bar[t] * h + s.bx[t]
        y[t] = np.sum(s.c[t] * h, axis=-1)
    return y


def scan_parallel(s: ScanInputs) -> np.ndarray:
    """y [L, D] via the associative (Blelloch) scan."""
    h = linear_scan_blelloch(s.a_bar, s.bx, axis=0)
    return np.sum(s.c * h, axis=-1)


# ---------------------------------------------------------------- fused differentiable scan

def _time_scan(mode: str):
    if mode == "recurrent":
        return linear_scan_sequential
    if mode == "parallel":
        return linear_scan_blelloch
    raise ValueError(f"unknown scan mode {mode!r}; expected one of {MODES}")


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   mode: str = "parallel", chunk: int | None = 256) -> Tensor:
    """Fused discretise + scan + readout: ``y`` [.., L, D].

    ``x``, ``delta`` are [.., L, D]; ``B``, ``C`` are [.., L, N]; ``A`` is
    [D, N]. Time is processed in chunks of ``chunk`` steps with the state
    carried between them, so the [L, D, N] coefficient tensors are never
    materialised for the whole sequence. Only the chunk-boundary states are
    kept; the backward pass recomputes each chunk and runs the adjoint
    recurrence ``lam_t = a_bar_{t+1} lam_{t+1} + dy_t c_t`` with the same
    scan, in reverse.
    """
    scan = _time_scan(mode)
    squeeze = x.ndim == 2
    xd, dd, Bd, Cd = (t.data[None] if squeeze else t.data for t in (x, delta, B, C))
    Ad = A.data
    nb, L, D = xd.shape
    N = Ad.shape[1]
    if dd.shape != xd.shape or Bd.shape != (nb, L, N) or Cd.shape != (nb, L, N) or Ad.shape[0] != D:
        raise ShapeError(
            f"selective_scan: x {x.shape}, delta {delta.shape}, A {A.shape}, B {B.shape}, C {C.shape}"
        )
    step = L if not chunk else max(1, int(chunk))
    bounds = [(t0, min(L, t0 + step)) for t0 in range(0, L, step)]
    dtype = np.result_type(xd, dd, Ad, Bd, Cd)
    itemsize = np.dtype(dtype).itemsize

    y = np.empty((nb, L, D), dtype=dtype)
    starts = np.empty((len(bounds), nb, D, N), dtype=dtype)
    h = np.zeros((nb, D, N), dtype=dtype)
    for i, (t0, t1) in enumerate(bounds):
        starts[i] = h
        with TRACKER.scratch(3 * nb * (t1 - t0) * D * N * itemsize):
            a_bar, bx = _discretize(dd[:, t0:t1], Ad, Bd[:, t0:t1], xd[:, t0:t1])
            hs = scan(a_bar, bx, h0=h, axis=1)
            y[:, t0:t1] = np.matmul(hs, Cd[:, t0:t1, :, None])[..., 0]
            h = hs[:, -1].copy()
    out = Tensor(y[0] if squeeze else y)
    # boundary states stay alive with the closure
    saved = Tensor(starts)

    def backward(g):
        g = g[None] if squeeze else g
        gx = np.empty_like(xd)
        gdelta = np.empty_like(dd)
        gB = np.empty_like(Bd)
        gC = np.empty_like(Cd)
        gA = np.zeros_like(Ad)
        lam_carry = np.zeros((nb, D, N), dtype=dtype)
        a_next = np.zeros((nb, 1, D, N), dtype=dtype)
        for i in reversed(range(len(bounds))):
            t0, t1 = bounds[i]
            T = t1 - t0
            start = saved.data[i]
            dc, xc, Bc, Cc, gy = dd[:, t0:t1], xd[:, t0:t1], Bd[:, t0:t1], Cd[:, t0:t1], g[:, t0:t1]
            with TRACKER.scratch(6 * nb * T * D * N * itemsize):
                a_bar, bx = _discretize(dc, Ad, Bc, xc)
                hs = scan(a_bar, bx, h0=start, axis=1)
                gC[:, t0:t1] = np.matmul(gy[:, :, None, :], hs)[:, :, 0, :]
                gh = gy[..., None] * Cc[:, :, None, :]
                coef = np.concatenate([a_bar[:, 1:], a_next], axis=1)
                lam = scan(coef[:, ::-1], gh[:, ::-1], h0=lam_carry, axis=1)[:, ::-1]
                h_prev = np.concatenate([start[:, None], hs[:, :-1]], axis=1)
                g_exp = lam * h_prev * a_bar  # d/d(delta * A)
                gA += (g_exp * dc[..., None]).sum(axis=(0, 1))
                s = np.matmul(lam, Bc[..., None])[..., 0]  # sum_n lam * B
                gx[:, t0:t1] = s * dc
                gdelta[:, t0:t1] = (g_exp * Ad).sum(axis=-1) + s * xc
                gB[:, t0:t1] = np.matmul((dc * xc)[:, :, None, :], lam)[:, :, 0, :]
                lam_carry = lam[:, 0].copy()
                a_next = a_bar[:, :1].copy()
        if squeeze:
            gx, gdelta, gB, gC = gx[0], gdelta[0], gB[0], gC[0]
        return gx, gdelta, gA, gB, gC

    return record(out, (x, delta, A, B, C), backward)


# ---------------------------------------------------------------- block

def depthwise_causal_conv(x: Tensor, kernel: Tensor) -> Tensor:
    return ops.causal_conv1d(x, kernel)


def _finite(t: Tensor, stage: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise EvaluationError(f"non-finite values after stage '{stage}'")
    return t


def mamba_block_forward(u: Tensor, params: SsmBlockParams, mode: str = "parallel",
                        chunk: int | None = 256) -> Tensor:
    """Gated selective-SSM block, ``[.., L, d_model] -> [.., L, d_model]``.

    in-projection to stream ``x`` and gate ``z``; causal depthwise conv + SiLU
    on ``x``; selective scan; skip ``D * x``; gate by ``silu(z)``;
    out-projection. Every stage maps zero to zero.
    """
    _time_scan(mode)
    if u.shape[-1] != params.d_model:
        raise ShapeError(f"mamba_block_forward: input {u.shape} vs d_model={params.d_model}")
    _finite(u, "input")
    d_inner = params.d_inner
    xz = _finite(ops.matmul(u, params.in_proj), "in_projection")
    x = xz[..., :d_inner]
    z = xz[..., d_inner:]
    x = _finite(ops.silu(depthwise_causal_conv(x, params.conv_kernel)), "conv")
    delta, b, c = select_params(x, params)
    _finite(delta, "selection")
    A = ops.neg(ops.exp(params.A_log))
    y = _finite(selective_scan(x, delta, A, b, c, mode=mode, chunk=chunk), "scan")
    y = ops.add(y, ops.mul(x, params.D_skip))
    y = ops.mul(y, ops.silu(z))
    return _finite(ops.matmul(y, params.out_proj), "out_projection")
