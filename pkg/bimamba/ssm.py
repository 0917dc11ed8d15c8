##############################################################################
# ssm.py
# Selective state-space recurrence: parameter generation, discretization,
# sequential and associative-parallel scans, and directional wrapping.
##############################################################################
import enum
import logging
import math
from typing import NamedTuple, Optional, Tuple, Union

import torch
from torch import nn

from bimamba import ops
from bimamba._exceptions import ContractError, ShapeError
from bimamba._internal_utils import Chunked

__all__ = [
    "Direction",
    "Discretization",
    "ScanMode",
    "SsmDirection",
    "ScanCoefficients",
    "generate_ssm_inputs",
    "discretize",
    "combine",
    "selective_scan_sequential",
    "selective_scan_parallel",
    "scan_in_frame",
    "directional_scan",
    "default_dt_rank",
    "max_init_dt",
]

logger = logging.getLogger(__name__)

DT_MIN = 1e-3
DT_MAX = 1e-1
DT_FLOOR = 1e-4


class Direction(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


class Discretization(enum.Enum):
    MULTIPLICATION = "multiplication"
    EXPONENTIAL = "exponential"


class ScanMode(enum.Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"


def default_dt_rank(d_model: int) -> int:
    return math.ceil(d_model / 16)


def max_init_dt(d_state: int) -> float:
    """
    Largest initial step size for a direction with `d_state` states.

    With ``A[e, n] = -(n + 1)`` the multiplicative rule gives
    ``|a_bar| = delta * (n + 1)``; capping ``delta`` at ``1 / (2 N)`` keeps
    every ``|a_bar|`` at or below 1/2 for zero input.
    """
    return min(DT_MAX, 0.5 / d_state)


class SsmDirection(nn.Module):
    """
    Parameters of one scan direction: the diagonal state matrix, the
    generators for the step size and the input/output projections, and the
    causal convolution that precedes the scan.

    ``A = -exp(A_log)`` so every entry is strictly negative.
    """

    def __init__(
        self,
        d_inner: int,
        d_state: int,
        d_conv: int,
        dt_rank: int,
        direction: Union[Direction, str] = Direction.FORWARD,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if min(d_inner, d_state, d_conv, dt_rank) < 1:
            raise ShapeError(
                "SsmDirection dimensions must be positive, got"
                f" d_inner={d_inner}, d_state={d_state},"
                f" d_conv={d_conv}, dt_rank={dt_rank}"
            )
        self.direction = Direction(direction)
        self.d_inner = d_inner
        self.d_state = d_state

        def param(*shape):
            return nn.Parameter(torch.empty(*shape, dtype=dtype))

        self.A_log = param(d_inner, d_state)
        self.dt_down = param(d_inner, dt_rank)
        self.dt_up = param(dt_rank, d_inner)
        self.dt_bias = param(d_inner)
        self.B_weight = param(d_inner, d_state)
        self.C_weight = param(d_inner, d_state)
        self.conv_kernel = param(d_inner, d_conv)
        self.conv_bias = param(d_inner)

    @property
    def A(self) -> torch.Tensor:
        return ops.neg(ops.exp(self.A_log))

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator) -> None:
        """
        Initializes the direction so that ``A[e, n] = -(n + 1)`` and the
        step size at zero input is spread log-uniformly over
        [`DT_MIN`, `max_init_dt(d_state)`].
        """
        dtype = self.A_log.dtype
        e, n = self.A_log.shape
        states = torch.arange(1, n + 1, dtype=dtype)
        self.A_log.copy_(torch.log(states).expand(e, n))

        def uniform_(tensor: torch.Tensor, bound: float):
            noise = torch.rand(tensor.shape, generator=generator, dtype=dtype)
            tensor.copy_((noise * 2 - 1) * bound)

        rank = self.dt_down.shape[1]
        uniform_(self.dt_down, e**-0.5)
        uniform_(self.dt_up, rank**-0.5)
        uniform_(self.B_weight, e**-0.5)
        uniform_(self.C_weight, e**-0.5)
        width = self.conv_kernel.shape[1]
        uniform_(self.conv_kernel, width**-0.5)
        uniform_(self.conv_bias, width**-0.5)

        dt_max = max_init_dt(n)
        dt_min = min(DT_MIN, dt_max)
        log_dt = torch.rand(e, generator=generator, dtype=dtype)
        log_dt = log_dt * (math.log(dt_max) - math.log(dt_min)) + math.log(
            dt_min
        )
        dt = torch.exp(log_dt).clamp(min=DT_FLOOR)
        # Inverse of softplus
        self.dt_bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def extra_repr(self) -> str:
        return (
            f"direction={self.direction.value}, d_inner={self.d_inner},"
            f" d_state={self.d_state}"
        )


class ScanCoefficients(NamedTuple):
    """
    Discretized recurrence coefficients for one sequence.

    Attributes:
        a_bar: State transition, ``(..., L, E, N)``.
        b_bar: Input matrix, ``(..., L, E, N)``, not yet multiplied by the
            input.
        c: Output matrix, ``(..., L, N)``.
    """

    a_bar: torch.Tensor
    b_bar: torch.Tensor
    c: torch.Tensor

    def driven(self, x_prime: torch.Tensor) -> torch.Tensor:
        """``b_bar[t, e, :] * x'[t, e]``, the input term of the recurrence."""
        return ops.mul(self.b_bar, x_prime.unsqueeze(-1))

    def check(self, x_prime: torch.Tensor) -> None:
        a_shape = tuple(self.a_bar.shape)
        if tuple(self.b_bar.shape) != a_shape:
            raise ShapeError(
                f"a_bar {a_shape} and b_bar {tuple(self.b_bar.shape)} differ"
            )
        *lead, length, lanes, states = a_shape
        if tuple(x_prime.shape) != (*lead, length, lanes):
            raise ShapeError(
                f"x' of shape {tuple(x_prime.shape)} does not match"
                f" coefficients of shape {a_shape}"
            )
        if tuple(self.c.shape) != (*lead, length, states):
            raise ShapeError(
                f"C of shape {tuple(self.c.shape)} does not match"
                f" coefficients of shape {a_shape}"
            )


def generate_ssm_inputs(
    x_prime: torch.Tensor, params: SsmDirection
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Projects ``x'`` (shape ``(..., L, E)``) into the input-dependent step
    size ``delta`` (``(..., L, E)``, strictly positive) and the ``B`` and
    ``C`` matrices (``(..., L, N)``).
    """
    if x_prime.shape[-1] != params.d_inner:
        raise ShapeError(
            f"x' has {x_prime.shape[-1]} channels,"
            f" the direction expects {params.d_inner}"
        )
    low = ops.matmul(x_prime, params.dt_down)
    delta = ops.softplus(
        ops.add(ops.matmul(low, params.dt_up), params.dt_bias)
    )
    B = ops.matmul(x_prime, params.B_weight)
    C = ops.matmul(x_prime, params.C_weight)
    return delta, B, C


def discretize(
    delta: torch.Tensor,
    A: torch.Tensor,
    B: torch.Tensor,
    mode: Union[Discretization, str] = Discretization.MULTIPLICATION,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Turns the continuous parameters into per-position coefficients.

    With the default multiplication rule ``a_bar = delta * A`` and
    ``b_bar = delta * B``, broadcast to ``(..., L, E, N)``. The exponential
    rule uses ``a_bar = exp(delta * A)`` and keeps the same ``b_bar``.
    """
    mode = Discretization(mode)
    if A.shape != (delta.shape[-1], B.shape[-1]):
        raise ShapeError(
            f"A of shape {tuple(A.shape)} does not match delta"
            f" {tuple(delta.shape)} and B {tuple(B.shape)}"
        )
    step = delta.unsqueeze(-1)
    a_bar = ops.mul(step, A)
    if mode is Discretization.EXPONENTIAL:
        a_bar = ops.exp(a_bar)
    b_bar = ops.mul(step, B.unsqueeze(-2))
    return a_bar, b_bar


def combine(
    first: Tuple[torch.Tensor, torch.Tensor],
    second: Tuple[torch.Tensor, torch.Tensor],
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    The associative operator of the recurrence ``h = a * h_prev + b``:
    applying `first` then `second` equals applying
    ``(a1 * a2, a2 * b1 + b2)``.
    """
    a1, b1 = first
    a2, b2 = second
    return ops.mul(a1, a2), ops.add(ops.mul(a2, b1), b2)


def _readout(h: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    # y[..., e] = sum_n c[..., n] * h[..., e, n]
    return ops.reduce_sum(ops.mul(h, c.unsqueeze(-2)), axis=-1)


def selective_scan_sequential(
    coef: ScanCoefficients, x_prime: torch.Tensor
) -> torch.Tensor:
    """
    Runs the recurrence one position at a time from ``h(0) = 0``.

    Only the running state is kept between steps, so the working set is
    independent of the sequence length.
    """
    coef.check(x_prime)
    length = x_prime.shape[-2]
    h: Optional[torch.Tensor] = None
    outputs = []
    for t in range(length):
        drive = ops.mul(coef.b_bar[..., t, :, :], x_prime[..., t, :, None])
        if h is None:
            h = drive
        else:
            h = ops.add(ops.mul(coef.a_bar[..., t, :, :], h), drive)
        outputs.append(_readout(h, coef.c[..., t, :]))
    return ops.stack(outputs, axis=-2)


def _interleave(even: torch.Tensor, odd: torch.Tensor) -> torch.Tensor:
    pairs = ops.stack((even, odd), axis=-3)
    return pairs.reshape(*even.shape[:-3], -1, *even.shape[-2:])


def _prefix_scan(
    a: torch.Tensor, b: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    # Inclusive scan over axis -3. The up pass combines adjacent pairs and
    # recurses on the half-length sequence; the down pass fills the even
    # positions from the odd prefixes.
    length = a.shape[-3]
    if length == 1:
        return a, b
    if length % 2:
        pad_shape = (*a.shape[:-3], 1, *a.shape[-2:])
        a = ops.concat((a, torch.ones(pad_shape, dtype=a.dtype)), axis=-3)
        b = ops.concat((b, torch.zeros(pad_shape, dtype=b.dtype)), axis=-3)

    a_even, a_odd = a[..., 0::2, :, :], a[..., 1::2, :, :]
    b_even, b_odd = b[..., 0::2, :, :], b[..., 1::2, :, :]
    odd_a, odd_b = _prefix_scan(*combine((a_even, b_even), (a_odd, b_odd)))

    if odd_a.shape[-3] > 1:
        fill_a, fill_b = combine(
            (odd_a[..., :-1, :, :], odd_b[..., :-1, :, :]),
            (a_even[..., 1:, :, :], b_even[..., 1:, :, :]),
        )
        even_a = ops.concat((a_even[..., :1, :, :], fill_a), axis=-3)
        even_b = ops.concat((b_even[..., :1, :, :], fill_b), axis=-3)
    else:
        even_a, even_b = a_even, b_even

    scan_a = _interleave(even_a, odd_a)[..., :length, :, :]
    scan_b = _interleave(even_b, odd_b)[..., :length, :, :]
    return scan_a, scan_b


def selective_scan_parallel(
    coef: ScanCoefficients, x_prime: torch.Tensor
) -> torch.Tensor:
    """
    Computes the same outputs as `selective_scan_sequential` with an
    associative scan over the sequence axis.

    Each of the O(log L) levels is a handful of vectorized ops over all
    ``E x N`` lanes; the reduction tree is fixed by the sequence length, so
    results are deterministic.
    """
    coef.check(x_prime)
    _, h = _prefix_scan(coef.a_bar, coef.driven(x_prime))
    return _readout(h, coef.c)


_SCANS = {
    ScanMode.SEQUENTIAL: selective_scan_sequential,
    ScanMode.PARALLEL: selective_scan_parallel,
}


def scan_in_frame(
    x_prime: torch.Tensor,
    params: SsmDirection,
    mode: Union[ScanMode, str] = ScanMode.SEQUENTIAL,
    *,
    discretization: Union[Discretization, str] = Discretization.MULTIPLICATION,
    scan_chunk: int = 0,
) -> torch.Tensor:
    """
    Scans `x_prime` left to right, ignoring ``params.direction``.

    Channels are processed `scan_chunk` at a time (0 means all at once) so
    the ``(L, E, N)`` coefficients of the whole sequence never coexist.
    """
    scan = _SCANS[ScanMode(mode)]
    delta, B, C = generate_ssm_inputs(x_prime, params)
    A = params.A
    outputs = []
    for lanes in Chunked(params.d_inner, scan_chunk).slices():
        a_bar, b_bar = discretize(
            delta[..., lanes], A[lanes], B, mode=discretization
        )
        outputs.append(
            scan(ScanCoefficients(a_bar, b_bar, C), x_prime[..., lanes])
        )
        del a_bar, b_bar
    if len(outputs) == 1:
        return outputs[0]
    return ops.concat(outputs, axis=-1)


def directional_scan(
    x_prime: torch.Tensor,
    params: SsmDirection,
    mode: Union[ScanMode, str] = ScanMode.SEQUENTIAL,
    *,
    discretization: Union[Discretization, str] = Discretization.MULTIPLICATION,
    scan_chunk: int = 0,
) -> torch.Tensor:
    """
    Scans `x_prime` (``(..., L, E)``, natural order) in the direction of
    `params`.

    The backward direction reverses the sequence, scans and reverses the
    output back, so its output at position t depends only on positions
    >= t.
    """
    if x_prime.dim() < 2:
        raise ShapeError(
            f"x' must have shape (..., L, E), got {tuple(x_prime.shape)}"
        )
    if x_prime.dtype != params.A_log.dtype:
        raise ContractError(
            f"x' dtype {x_prime.dtype} does not match parameter dtype"
            f" {params.A_log.dtype}"
        )
    backward = params.direction is Direction.BACKWARD
    if backward:
        x_prime = ops.reverse(x_prime, axis=-2)
    y = scan_in_frame(
        x_prime,
        params,
        mode,
        discretization=discretization,
        scan_chunk=scan_chunk,
    )
    if backward:
        y = ops.reverse(y, axis=-2)
    return y
