##############################################################################
# bench.py
# Wall-time and activation-memory sweeps over sequence length
##############################################################################
"""
Benchmarks the bidirectional block against an attention block, and the two
scan implementations against each other, across sequence lengths.

Timing is the median of ``repeats`` runs after ``warmup`` discarded runs,
measured with a monotonic nanosecond clock while torch is pinned to one
thread. Memory is the peak of live op outputs reported by
`ActivationAccountant`, once for a forward pass under ``torch.no_grad`` and,
for the two blocks, once for a training step: forward, a squared-output loss
and the backward pass, with the autograd tape holding what backward needs.
"""
import csv
import dataclasses
import enum
import io
import logging
import time
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy
import torch

from bimamba import ops, utils
from bimamba._exceptions import ConfigError, InsufficientDataError
from bimamba.attention import AttentionBlock, AttnConfig, default_heads
from bimamba.model import BiMambaBlock, ModelConfig, Views
from bimamba.ssm import (
    Direction,
    ScanCoefficients,
    SsmDirection,
    default_dt_rank,
    discretize,
    generate_ssm_inputs,
    selective_scan_parallel,
    selective_scan_sequential,
)

__all__ = [
    "Kernel",
    "BenchConfig",
    "BenchRecord",
    "ExponentFit",
    "measure",
    "sweep",
    "fit_exponent",
    "report",
    "read_report",
    "resolution_lengths",
    "DEFAULT_LENGTHS",
]

logger = logging.getLogger(__name__)

DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096)
CSV_FIELDS = (
    "kernel",
    "L",
    "D",
    "E",
    "N",
    "heads",
    "wall_ns",
    "peak_bytes",
    "train_peak_bytes",
)


class Kernel(enum.Enum):
    BIMAMBA_BLOCK = "bimamba_block"
    ATTN_BLOCK = "attn_block"
    SCAN_SEQUENTIAL = "scan_sequential"
    SCAN_PARALLEL = "scan_parallel"


@dataclasses.dataclass
class BenchConfig:
    d_model: int = 384
    d_inner: int = 768
    d_state: int = 16
    d_conv: int = 4
    # 0 picks the conventional head count for d_model
    heads: int = 0
    repeats: int = 9
    warmup: int = 2
    scan_chunk: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 5:
            raise ConfigError(f"repeats must be >= 5, got {self.repeats}")
        if self.warmup < 2:
            raise ConfigError(f"warmup must be >= 2, got {self.warmup}")
        if self.heads == 0:
            self.heads = default_heads(self.d_model)


@dataclasses.dataclass
class BenchRecord:
    kernel: str
    L: int
    D: int
    E: int
    N: int
    heads: int
    wall_ns: int
    peak_bytes: int
    # 0 for the scans, which have no training step
    train_peak_bytes: int = 0
    raw_ns: Tuple[int, ...] = dataclasses.field(default=(), compare=False)
    checksum: float = dataclasses.field(default=float("nan"), compare=False)

    def csv_row(self) -> Tuple:
        return tuple(getattr(self, name) for name in CSV_FIELDS)


class ExponentFit(NamedTuple):
    slope: float
    intercept: float
    r_squared: float


def resolution_lengths(
    sizes: Iterable[int], patch_size: int = 16, views: str = "multi"
) -> List[int]:
    """
    Token sequence lengths for square images of each size: ``J + 1`` for a
    single view and ``2J + 1`` for two concatenated views.
    """
    views = Views(views)
    lengths = []
    for size in sizes:
        if size % patch_size:
            raise ConfigError(
                f"Image size {size} is not divisible by patch {patch_size}"
            )
        j = (size // patch_size) ** 2
        lengths.append(2 * j + 1 if views is Views.MULTI else j + 1)
    return lengths


def _uniform_(param: torch.Tensor, generator: torch.Generator) -> None:
    noise = torch.rand(param.shape, generator=generator, dtype=param.dtype)
    param.copy_((noise * 2 - 1) * param.shape[0] ** -0.5)


@torch.no_grad()
def _build(
    kernel: Kernel, config: BenchConfig
) -> Tuple[Callable[[torch.Tensor], torch.Tensor], int]:
    """Returns the function to time and the width of its input."""
    generator = torch.Generator().manual_seed(config.seed)
    if kernel is Kernel.ATTN_BLOCK:
        block = AttentionBlock(
            AttnConfig(config.d_model, config.heads), seed=config.seed
        )
        return block, config.d_model
    if kernel is Kernel.BIMAMBA_BLOCK:
        block = BiMambaBlock(
            ModelConfig(
                n_blocks=1,
                d_model=config.d_model,
                d_inner=config.d_inner,
                d_state=config.d_state,
                d_conv=config.d_conv,
                scan_mode="parallel",
                scan_chunk=config.scan_chunk,
            )
        )
        block.reset_parameters(generator)
        # Zero-initialized output projection would make the block a no-op
        _uniform_(block.out_proj, generator)
        return block, config.d_model

    direction = SsmDirection(
        config.d_inner,
        config.d_state,
        config.d_conv,
        default_dt_rank(config.d_model),
        Direction.FORWARD,
    )
    direction.reset_parameters(generator)
    scan = (
        selective_scan_sequential
        if kernel is Kernel.SCAN_SEQUENTIAL
        else selective_scan_parallel
    )

    def run_scan(x_prime: torch.Tensor) -> torch.Tensor:
        delta, B, C = generate_ssm_inputs(x_prime, direction)
        a_bar, b_bar = discretize(delta, direction.A, B)
        return scan(ScanCoefficients(a_bar, b_bar, C), x_prime)

    return run_scan, config.d_inner


def _training_peak(block: torch.nn.Module, x: torch.Tensor) -> int:
    with torch.enable_grad(), utils.ActivationAccountant() as accountant:
        out = block(x)
        ops.backward(ops.reduce_sum(ops.mul(out, out)))
        del out
    for param in block.parameters():
        param.grad = None
    return accountant.peak_bytes


def measure(
    kernel, lengths: Sequence[int], config: Optional[BenchConfig] = None
) -> List[BenchRecord]:
    """
    Times `kernel` at every sequence length and records its peak activation
    bytes.

    Args:
        kernel: A `Kernel` or its string value.
        lengths: Strictly increasing sequence lengths, at least two.
        config: Model widths and timing parameters.
    """
    kernel = Kernel(kernel)
    config = config or BenchConfig()
    lengths = [int(n) for n in lengths]
    if len(lengths) < 2 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ConfigError(
            f"Sequence lengths must be strictly increasing with at least"
            f" two values, got {lengths}"
        )
    fn, width = _build(kernel, config)
    is_attn = kernel is Kernel.ATTN_BLOCK
    is_scan = kernel in (Kernel.SCAN_SEQUENTIAL, Kernel.SCAN_PARALLEL)
    records = []
    with torch.no_grad(), utils.single_threaded():
        for length in lengths:
            x = ops.create(
                (length, width), "normal", seed=config.seed + length
            )
            for _ in range(config.warmup):
                fn(x)
            timings = []
            for _ in range(config.repeats):
                start = time.perf_counter_ns()
                out = fn(x)
                timings.append(time.perf_counter_ns() - start)
                del out
            with utils.ActivationAccountant() as accountant:
                out = fn(x)
                checksum = float(out.double().sum())
                del out
            train_peak = 0 if is_scan else _training_peak(fn, x)
            record = BenchRecord(
                kernel=kernel.value,
                L=length,
                D=config.d_model,
                E=0 if is_attn else config.d_inner,
                N=0 if is_attn else config.d_state,
                heads=config.heads if is_attn else 0,
                wall_ns=max(1, int(numpy.median(timings))),
                peak_bytes=accountant.peak_bytes,
                train_peak_bytes=train_peak,
                raw_ns=tuple(timings),
                checksum=checksum,
            )
            logger.debug(
                f"{kernel.value} L={length}: {record.wall_ns:,} ns,"
                f" peak {utils.convert_bytes(record.peak_bytes)}"
                + (f", checksum {checksum:.6g}" if is_scan else "")
            )
            records.append(record)
    return records


def sweep(
    kernels: Iterable,
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    config: Optional[BenchConfig] = None,
) -> List[BenchRecord]:
    """Runs `measure` for each kernel in turn."""
    config = config or BenchConfig()
    logger.info(f"Benchmark sweep starting; {utils.get_mem_usage()}")
    records = []
    for kernel in kernels:
        records.extend(measure(kernel, lengths, config))
    logger.info(f"Benchmark sweep finished; {utils.get_mem_usage()}")
    return records


def fit_exponent(
    records: Sequence[BenchRecord], value: str = "wall_ns"
) -> ExponentFit:
    """
    Least-squares slope of ``log(value)`` against ``log(L)``.

    Raises:
        InsufficientDataError: With fewer than 4 points, or when the lengths
            span less than a factor of 8.
    """
    if value not in ("wall_ns", "peak_bytes", "train_peak_bytes"):
        raise ValueError(f"Cannot fit {value!r}")
    kernels = {r.kernel for r in records}
    if len(kernels) > 1:
        raise ValueError(f"Records mix kernels: {sorted(kernels)}")
    if len(records) < 4:
        raise InsufficientDataError(
            f"Exponent fit needs at least 4 points, got {len(records)}"
        )
    lengths = numpy.array([r.L for r in records], dtype=numpy.float64)
    if lengths.max() < 8 * lengths.min():
        raise InsufficientDataError(
            f"Exponent fit needs lengths spanning at least 8x,"
            f" got {lengths.min():g}..{lengths.max():g}"
        )
    ys = numpy.array([getattr(r, value) for r in records], dtype=numpy.float64)
    log_l, log_y = numpy.log(lengths), numpy.log(ys)
    slope, intercept = numpy.polyfit(log_l, log_y, 1)
    residual = log_y - (slope * log_l + intercept)
    total = ((log_y - log_y.mean()) ** 2).sum()
    r_squared = 1.0 - (residual**2).sum() / total if total > 0 else 1.0
    return ExponentFit(float(slope), float(intercept), float(r_squared))


def _by_kernel(records: Iterable[BenchRecord]) -> Dict[str, List[BenchRecord]]:
    grouped: Dict[str, List[BenchRecord]] = {}
    for record in records:
        grouped.setdefault(record.kernel, []).append(record)
    return grouped


def report(records: Sequence[BenchRecord]) -> Tuple[str, str]:
    """
    Renders records as CSV plus a human-readable summary with per-kernel
    exponents and the inference and training memory ratios between the
    bidirectional block and attention at the largest length both were
    measured at.
    """
    if not records:
        raise InsufficientDataError("No benchmark records to report")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for record in records:
        writer.writerow(record.csv_row())

    lines = []
    grouped = _by_kernel(records)
    for kernel, rows in grouped.items():
        rows = sorted(rows, key=lambda r: r.L)
        try:
            time_fit = fit_exponent(rows, "wall_ns")
            memory_fit = fit_exponent(rows, "peak_bytes")
        except InsufficientDataError as e:
            lines.append(f"{kernel}: no exponent fit ({e})")
            continue
        line = (
            f"{kernel}: time exponent {time_fit.slope:.3f}"
            f" (R^2 {time_fit.r_squared:.3f}), memory exponent"
            f" {memory_fit.slope:.3f} (R^2 {memory_fit.r_squared:.3f})"
        )
        if all(r.train_peak_bytes > 0 for r in rows):
            train_fit = fit_exponent(rows, "train_peak_bytes")
            line += f", training memory exponent {train_fit.slope:.3f}"
        lines.append(line)
    ssm = {r.L: r for r in grouped.get(Kernel.BIMAMBA_BLOCK.value, ())}
    attn = {r.L: r for r in grouped.get(Kernel.ATTN_BLOCK.value, ())}
    common = sorted(ssm.keys() & attn.keys())
    if common:
        length = common[-1]
        for label, field in (
            ("memory", "peak_bytes"),
            ("training memory", "train_peak_bytes"),
        ):
            ours = getattr(ssm[length], field)
            theirs = getattr(attn[length], field)
            if not theirs:
                continue
            ratio = ours / theirs
            lines.append(
                f"{label} at L={length}: bimamba_block"
                f" {utils.convert_bytes(ours)}, attn_block"
                f" {utils.convert_bytes(theirs)},"
                f" ratio {ratio:.3f} ({(1 - ratio) * 100:.1f}% less)"
            )
    return buffer.getvalue(), "\n".join(lines) + "\n"


def read_report(text: str) -> List[BenchRecord]:
    """Parses CSV produced by `report` back into records."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"Unexpected CSV header {reader.fieldnames}")
    return [
        BenchRecord(
            kernel=row["kernel"],
            **{k: int(row[k]) for k in CSV_FIELDS[1:]},
        )
        for row in reader
    ]
