import collections
import contextlib
import contextvars
import threading
import weakref
from typing import Dict, Iterator, NamedTuple

import psutil
import torch

try:
    import resource
except ImportError:
    resource = None

__all__ = [
    "convert_bytes",
    "CPUMemoryUsage",
    "MemoryUsage",
    "get_mem_usage",
    "ActivationAccountant",
    "record_activation",
    "single_threaded",
]


# Silly function to convert to human bytes
def convert_bytes(num, decimal=True) -> str:
    """
    Convert bytes to MB, GB, etc.

    Args:
        num: Quantity of bytes to format.
        decimal: Whether to use decimal or binary units
            (e.g. KB = 1000 bytes vs. KiB = 1024 bytes).

    Returns:
        A string in the format ``<n> <units>`` (e.g. ``123.4 MB``).
    """
    if decimal:
        step_unit = 1000.0
        units = ("bytes", "KB", "MB", "GB", "TB", "PB")
    else:
        step_unit = 1024.0
        units = ("bytes", "KiB", "MiB", "GiB", "TiB", "PiB")

    for unit in units[:-1]:
        if num < step_unit:
            break
        num /= step_unit
    else:
        unit = units[-1]
    return "%3.1f %s" % (num, unit)


class CPUMemoryUsage(NamedTuple):
    """Memory usage statistics for CPU RAM."""

    maxrss: int
    free: int

    @classmethod
    def now(cls) -> "CPUMemoryUsage":
        """
        Capture a snapshot of the current CPU RAM usage.

        Returns:
            A tuple of (`maxrss`, `free`) RAM statistics in bytes,
            where maxrss is the max resident set size of the current process.
        """
        if resource is not None:
            maxrss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss << 10
        else:
            maxrss = psutil.Process().memory_info().rss
        return cls(maxrss, psutil.virtual_memory().free)

    def __str__(self):
        return "CPU: (maxrss: {:,}MiB F: {:,}MiB)".format(
            self.maxrss >> 20, self.free >> 20
        )


class MemoryUsage(NamedTuple):
    """
    Process RAM together with the torch intra-op thread count,
    the two numbers worth logging around a training run or a sweep.
    """

    cpu: CPUMemoryUsage
    torch_threads: int

    @classmethod
    def now(cls) -> "MemoryUsage":
        return cls(CPUMemoryUsage.now(), torch.get_num_threads())

    def __str__(self):
        return f"{self.cpu} TORCH: (threads: {self.torch_threads})"


def get_mem_usage() -> str:
    """
    Captures and formats memory usage statistics.

    Equivalent to ``str(MemoryUsage.now())``.
    """
    return str(MemoryUsage.now())


_ACTIVE_ACCOUNTANT = contextvars.ContextVar(
    "ActivationAccountant.active", default=None
)


class ActivationAccountant(contextlib.AbstractContextManager):
    """
    Counts the bytes of every intermediate tensor produced by `bimamba.ops`
    while the accountant is active.

    A tensor counts as live from the moment an op returns it until its
    Python object is released. Under ``torch.no_grad()`` that is the forward
    working set; with autograd enabled, the tensors the tape keeps for the
    backward pass stay live as well.

    Example:
        Measuring one block::

            with torch.no_grad(), ActivationAccountant() as accountant:
                block(tokens)
            print(accountant.peak_bytes)
    """

    def __init__(self):
        self.live_bytes: int = 0
        self.peak_bytes: int = 0
        self.total_bytes: int = 0
        self.by_label: Dict[str, int] = collections.Counter()
        self._lock = threading.RLock()
        self._tokens = []

    def record(self, label: str, tensor: torch.Tensor) -> None:
        nbytes = tensor.element_size() * tensor.nelement()
        with self._lock:
            self.live_bytes += nbytes
            self.total_bytes += nbytes
            self.by_label[label] += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes
        weakref.finalize(tensor, self._release, nbytes)

    def _release(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes

    def __enter__(self) -> "ActivationAccountant":
        self._tokens.append(_ACTIVE_ACCOUNTANT.set(self))
        return self

    def __exit__(self, __exc_type, __exc_value, __traceback):
        _ACTIVE_ACCOUNTANT.reset(self._tokens.pop())
        return None


def record_activation(label: str, tensor: torch.Tensor) -> torch.Tensor:
    accountant = _ACTIVE_ACCOUNTANT.get()
    if accountant is not None:
        accountant.record(label, tensor)
    return tensor


@contextlib.contextmanager
def single_threaded() -> Iterator[None]:
    """Pins torch to one intra-op thread, restoring the old count on exit."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)
