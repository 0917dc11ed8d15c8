##############################################################################
# ops.py
# Validated tensor arithmetic on torch, with activation accounting
##############################################################################
"""
Every array computation in bimamba goes through this module.

The functions take and return ``torch.Tensor`` objects and lean on torch's
autograd tape for reverse-mode differentiation. On top of torch they add:

- shape checks that raise `ShapeError` with the offending extents,
- dtype discipline (tensor operands must agree; python scalars are fine),
- a finiteness check on every result (`NonFiniteError` instead of NaN/Inf
  silently flowing downstream),
- registration of every result with the active `ActivationAccountant`.
"""
import enum
import logging
import weakref
from typing import Callable, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from bimamba._exceptions import ContractError, NonFiniteError, ShapeError
from bimamba.utils import record_activation

__all__ = [
    "Init",
    "Elementwise",
    "create",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "softplus",
    "silu",
    "sigmoid",
    "tanh",
    "gelu",
    "neg",
    "reduce_sum",
    "concat",
    "stack",
    "reverse",
    "softmax",
    "rms_norm",
    "layer_norm",
    "depthwise_conv1d",
    "backward",
    "finite_difference_gradient",
    "gradient_check",
    "GradCheckResult",
    "relative_error",
]

logger = logging.getLogger(__name__)

Scalar = Union[int, float]
Operand = Union[torch.Tensor, Scalar]

SUPPORTED_DTYPES = (torch.float32, torch.float64)
NORM_EPS = 1e-5
SOFTPLUS_THRESHOLD = 20.0


class Init(enum.Enum):
    ZEROS = "zeros"
    ONES = "ones"
    UNIFORM = "uniform"
    NORMAL = "normal"
    FROM_VALUES = "from_values"


class Elementwise(enum.Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    EXP = "exp"
    LOG = "log"
    SOFTPLUS = "softplus"
    SILU = "silu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    GELU = "gelu"
    NEG = "neg"


def _finish(label: str, out: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(out).all()):
        raise NonFiniteError(
            f"{label} produced non-finite values"
            f" (shape {tuple(out.shape)}, dtype {out.dtype})"
        )
    return record_activation(label, out)


def _check_dtypes(label: str, a: Operand, b: Operand) -> None:
    if (
        isinstance(a, torch.Tensor)
        and isinstance(b, torch.Tensor)
        and a.dtype != b.dtype
    ):
        raise ContractError(
            f"{label}: operand dtypes differ ({a.dtype} vs {b.dtype});"
            " convert explicitly, there is no implicit promotion"
        )


def create(
    shape: Sequence[int],
    init: Union[Init, str] = Init.ZEROS,
    *,
    seed: Optional[int] = None,
    low: float = -1.0,
    high: float = 1.0,
    mean: float = 0.0,
    std: float = 1.0,
    values=None,
    dtype: torch.dtype = torch.float32,
    requires_grad: bool = False,
) -> torch.Tensor:
    """
    Creates a tensor deterministically.

    Args:
        shape: Extents, each at least 1.
        init: One of `Init`'s members or their string values.
        seed: Required for ``uniform`` and ``normal``.
        low: Lower bound for ``uniform``.
        high: Upper bound for ``uniform``.
        mean: Mean for ``normal``.
        std: Standard deviation for ``normal``.
        values: Nested sequence or array for ``from_values``.
        dtype: ``torch.float32`` or ``torch.float64``.
        requires_grad: Whether the result is a gradient-tracking leaf.

    Returns:
        The new tensor. Seeded initializers use a private
        ``torch.Generator``, so global RNG state is neither read nor changed.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"Invalid shape {shape}: every extent must be >= 1")
    if dtype not in SUPPORTED_DTYPES:
        raise ContractError(f"Unsupported dtype {dtype}")
    init = Init(init)

    if init in (Init.UNIFORM, Init.NORMAL):
        if seed is None:
            raise ContractError(f"{init.value} initialization requires a seed")
        generator = torch.Generator().manual_seed(seed)
        if init is Init.UNIFORM:
            out = torch.rand(shape, generator=generator, dtype=dtype)
            out = out * (high - low) + low
        else:
            out = torch.randn(shape, generator=generator, dtype=dtype)
            out = out * std + mean
    elif init is Init.ZEROS:
        out = torch.zeros(shape, dtype=dtype)
    elif init is Init.ONES:
        out = torch.ones(shape, dtype=dtype)
    else:
        out = torch.as_tensor(values, dtype=dtype).clone()
        if out.numel() != _numel(shape):
            raise ShapeError(
                f"from_values: got {out.numel()} values for shape {shape}"
            )
        out = out.reshape(shape)

    if requires_grad:
        out.requires_grad_(True)
    return _finish("create", out)


def _numel(shape: Tuple[int, ...]) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Matrix product over the last two axes of `a` and `b`.

    `a` may carry leading batch axes; `b` is usually a 2-D weight.
    """
    _check_dtypes("matmul", a, b)
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions do not match"
            f" ({tuple(a.shape)} @ {tuple(b.shape)})"
        )
    return _finish("matmul", torch.matmul(a, b))


def _softplus(v: torch.Tensor) -> torch.Tensor:
    # Above the threshold F.softplus returns v itself; below -threshold
    # log(1 + exp(v)) equals exp(v) to working precision. The clamp keeps
    # the unselected branch finite so where() has a finite gradient.
    tail = torch.exp(torch.clamp(v, max=-SOFTPLUS_THRESHOLD))
    body = F.softplus(v, beta=1.0, threshold=SOFTPLUS_THRESHOLD)
    return torch.where(v < -SOFTPLUS_THRESHOLD, tail, body)


_BINARY = {
    Elementwise.ADD: torch.add,
    Elementwise.SUB: torch.sub,
    Elementwise.MUL: torch.mul,
    Elementwise.DIV: torch.div,
}

_UNARY = {
    Elementwise.EXP: torch.exp,
    Elementwise.LOG: torch.log,
    Elementwise.SOFTPLUS: _softplus,
    Elementwise.SILU: F.silu,
    Elementwise.SIGMOID: torch.sigmoid,
    Elementwise.TANH: torch.tanh,
    Elementwise.GELU: F.gelu,
    Elementwise.NEG: torch.neg,
}


def elementwise(
    op: Union[Elementwise, str], a: Operand, b: Optional[Operand] = None
) -> torch.Tensor:
    """
    Applies a unary or binary elementwise operation.

    Binary operands broadcast over trailing dimensions. Division by an exact
    zero raises `NonFiniteError` rather than producing Inf.
    """
    op = Elementwise(op)
    label = op.value
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{label} needs two operands")
        _check_dtypes(label, a, b)
        if isinstance(a, torch.Tensor) and isinstance(b, torch.Tensor):
            try:
                torch.broadcast_shapes(a.shape, b.shape)
            except RuntimeError as e:
                raise ShapeError(
                    f"{label}: shapes {tuple(a.shape)} and {tuple(b.shape)}"
                    " do not broadcast"
                ) from e
        if not isinstance(a, torch.Tensor) and not isinstance(
            b, torch.Tensor
        ):
            raise ContractError(f"{label} needs at least one tensor operand")
        if op is Elementwise.DIV and (
            bool((b == 0).any()) if isinstance(b, torch.Tensor) else b == 0
        ):
            raise NonFiniteError("div: division by exact zero")
        return _finish(label, _BINARY[op](a, b))
    if b is not None:
        raise ContractError(f"{label} takes a single operand")
    return _finish(label, _UNARY[op](a))


def add(a: Operand, b: Operand) -> torch.Tensor:
    return elementwise(Elementwise.ADD, a, b)


def sub(a: Operand, b: Operand) -> torch.Tensor:
    return elementwise(Elementwise.SUB, a, b)


def mul(a: Operand, b: Operand) -> torch.Tensor:
    return elementwise(Elementwise.MUL, a, b)


def div(a: Operand, b: Operand) -> torch.Tensor:
    return elementwise(Elementwise.DIV, a, b)


def exp(a: torch.Tensor) -> torch.Tensor:
    return elementwise(Elementwise.EXP, a)


def log(a: torch.Tensor) -> torch.Tensor:
    return elementwise(Elementwise.LOG, a)


def softplus(a: torch.Tensor) -> torch.Tensor:
    return elementwise(Elementwise.SOFTPLUS, a)


def silu(a: torch.Tensor) -> torch.Tensor:
    return elementwise(Elementwise.SILU, a)


def sigmoid(a: torch.Tensor) -> torch.Tensor:
    return elementwise(Elementwise.SIGMOID, a)


def tanh(a: torch.Tensor) -> torch.Tensor:
    return elementwise(Elementwise.TANH, a)


def gelu(a: torch.Tensor) -> torch.Tensor:
    return elementwise(Elementwise.GELU, a)


def neg(a: torch.Tensor) -> torch.Tensor:
    return elementwise(Elementwise.NEG, a)


def reduce_sum(
    a: torch.Tensor, axis: Optional[int] = None, keepdim: bool = False
) -> torch.Tensor:
    if axis is None:
        return _finish("sum", a.sum())
    return _finish("sum", a.sum(dim=axis, keepdim=keepdim))


def concat(tensors: Sequence[torch.Tensor], axis: int = 0) -> torch.Tensor:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"concat: mixed dtypes {sorted(map(str, dtypes))}")
    try:
        out = torch.cat(tuple(tensors), dim=axis)
    except RuntimeError as e:
        raise ShapeError(
            "concat: incompatible shapes"
            f" {[tuple(t.shape) for t in tensors]} along axis {axis}"
        ) from e
    return _finish("concat", out)


def stack(tensors: Sequence[torch.Tensor], axis: int = 0) -> torch.Tensor:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"stack: mixed dtypes {sorted(map(str, dtypes))}")
    try:
        out = torch.stack(tuple(tensors), dim=axis)
    except RuntimeError as e:
        raise ShapeError(
            "stack: incompatible shapes"
            f" {[tuple(t.shape) for t in tensors]}"
        ) from e
    return _finish("stack", out)


def reverse(a: torch.Tensor, axis: int) -> torch.Tensor:
    return _finish("reverse", torch.flip(a, dims=(axis,)))


def softmax(a: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Numerically stable softmax (torch subtracts the row maximum)."""
    if not -a.dim() <= axis < a.dim():
        raise ShapeError(f"softmax: axis {axis} out of range for {a.dim()}-D")
    return _finish("softmax", torch.softmax(a, dim=axis))


def _check_gain(label: str, a: torch.Tensor, gain: torch.Tensor) -> None:
    if gain.shape != (a.shape[-1],):
        raise ShapeError(
            f"{label}: gain of shape {tuple(gain.shape)} does not match"
            f" feature dimension {a.shape[-1]}"
        )
    _check_dtypes(label, a, gain)


def rms_norm(
    a: torch.Tensor, gain: torch.Tensor, eps: float = NORM_EPS
) -> torch.Tensor:
    """
    Divides each row by sqrt(mean(row**2) + eps) and scales by `gain`.
    """
    _check_gain("rms_norm", a, gain)
    scale = torch.rsqrt(a.pow(2).mean(dim=-1, keepdim=True) + eps)
    return _finish("rms_norm", a * scale * gain)


def layer_norm(
    a: torch.Tensor,
    gain: torch.Tensor,
    bias: torch.Tensor,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    _check_gain("layer_norm", a, gain)
    out = F.layer_norm(a, (a.shape[-1],), gain, bias, eps)
    return _finish("layer_norm", out)


def depthwise_conv1d(
    x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor
) -> torch.Tensor:
    """
    Causal per-channel convolution along the sequence axis.

    ``out[t, e] = sum_k kernel[e, k] * x[t - K + 1 + k, e] + bias[e]``
    with K - 1 zeros padded on the left, so ``out[t]`` only sees ``x[<= t]``.

    Args:
        x: Input of shape ``(..., L, E)``.
        kernel: Taps of shape ``(E, K)``; the last tap multiplies ``x[t]``.
        bias: Per-channel bias of shape ``(E,)``.
    """
    if x.dim() < 2:
        raise ShapeError(
            f"depthwise_conv1d: expected (..., L, E), got {x.dim()}-D input"
        )
    length, channels = x.shape[-2:]
    if kernel.dim() != 2 or kernel.shape[0] != channels:
        raise ShapeError(
            f"depthwise_conv1d: kernel {tuple(kernel.shape)} does not match"
            f" {channels} channels"
        )
    if bias.shape != (channels,):
        raise ShapeError(
            f"depthwise_conv1d: bias {tuple(bias.shape)} does not match"
            f" {channels} channels"
        )
    _check_dtypes("depthwise_conv1d", x, kernel)
    width = kernel.shape[1]
    lead = x.shape[:-2]
    series = x.reshape(-1, length, channels).transpose(1, 2)
    series = F.pad(series, (width - 1, 0))
    out = F.conv1d(series, kernel.unsqueeze(1), bias, groups=channels)
    out = out.transpose(1, 2).reshape(*lead, length, channels)
    return _finish("depthwise_conv1d", out)


# Losses whose graphs have already been consumed by backward()
_consumed_losses: "weakref.WeakSet[torch.Tensor]" = weakref.WeakSet()


def backward(loss: torch.Tensor) -> None:
    """
    Back-propagates a scalar loss into the ``.grad`` of every leaf that
    requires gradients.

    Raises:
        ContractError: If the loss is not a scalar, does not depend on any
            gradient-tracking tensor, or has already been back-propagated.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise ContractError(
            f"backward() needs a scalar loss, got shape {tuple(loss.shape)}"
        )
    if not loss.requires_grad:
        raise ContractError(
            "backward(): the loss does not depend on any tensor"
            " that requires gradients"
        )
    if loss in _consumed_losses:
        raise ContractError(
            "backward() was already called on this loss;"
            " recompute the forward pass before calling it again"
        )
    loss.backward()
    _consumed_losses.add(loss)


def finite_difference_gradient(
    f: Callable[[torch.Tensor], Union[torch.Tensor, float]],
    x: torch.Tensor,
    step: float = 1e-4,
) -> torch.Tensor:
    """
    Central-difference gradient of a scalar function, one coordinate at a
    time.

    `x` is perturbed in place (and restored), so `f` may either use its
    argument or close over `x` itself, e.g. a model parameter.
    """
    if not x.is_contiguous():
        raise ContractError("finite_difference_gradient needs a contiguous x")
    grad = torch.zeros_like(x, requires_grad=False)
    with torch.no_grad():
        flat = x.detach().view(-1)
        flat_grad = grad.view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + step
            plus = float(f(x))
            flat[i] = original - step
            minus = float(f(x))
            flat[i] = original
            flat_grad[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(
    analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-5
) -> float:
    """
    Largest per-coordinate relative error
    ``|a_i - n_i| / max(|a_i|, |n_i|, floor)`` between two gradients.
    Coordinates where both gradients are below `floor` are measured against
    `floor` instead of their own magnitude.
    """
    a = analytic.detach().to(torch.float64)
    n = numeric.detach().to(torch.float64)
    if a.numel() == 0:
        return 0.0
    scale = torch.maximum(a.abs(), n.abs()).clamp(min=floor)
    return float(((a - n).abs() / scale).max())


class GradCheckResult:
    __slots__ = ("max_relative_error", "worst_tensor", "errors")

    def __init__(self, errors: Sequence[Tuple[str, float]]):
        self.errors = list(errors)
        if self.errors:
            self.worst_tensor, self.max_relative_error = max(
                self.errors, key=lambda e: e[1]
            )
        else:
            self.worst_tensor, self.max_relative_error = None, 0.0

    def passed(self, tolerance: float) -> bool:
        return self.max_relative_error < tolerance

    def __repr__(self):
        return (
            f"GradCheckResult(max_relative_error={self.max_relative_error:.3e},"
            f" worst_tensor={self.worst_tensor!r})"
        )


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Sequence[Tuple[str, torch.Tensor]],
    step: float = 1e-4,
) -> GradCheckResult:
    """
    Compares autograd gradients of ``loss_fn()`` against central differences
    for every named tensor.

    Args:
        loss_fn: Recomputes the scalar loss from the current tensor values.
        tensors: ``(name, tensor)`` pairs; each tensor must require grad.
        step: Finite-difference step.
    """
    leaves = [t for _, t in tensors]
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)
    errors = []
    for (name, tensor), grad in zip(tensors, analytic):
        if grad is None:
            grad = torch.zeros_like(tensor)
        numeric = finite_difference_gradient(lambda _: loss_fn(), tensor, step)
        error = relative_error(grad, numeric)
        logger.debug(f"gradient check {name}: relative error {error:.3e}")
        errors.append((name, error))
    return GradCheckResult(errors)
