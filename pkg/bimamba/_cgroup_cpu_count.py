import math
import os
import pathlib
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Sequence

__all__ = ("effective_cpu_count", "loader_worker_count")

_CGROUP_ROOT = pathlib.Path("/sys/fs/cgroup")


def _read_fields(*paths: pathlib.Path) -> Sequence[str]:
    return [field for p in paths for field in p.read_text().split()]


@lru_cache(maxsize=None)
def _cpu_quota() -> Optional[Fraction]:
    # cgroup v2 keeps "<quota> <period>" in one file; v1 splits them
    v1 = _CGROUP_ROOT / "cpu,cpuacct"
    candidates = (
        (_CGROUP_ROOT / "cpu.max",),
        (v1 / "cpu.cfs_quota_us", v1 / "cpu.cfs_period_us"),
    )
    for paths in candidates:
        try:
            fields = _read_fields(*paths)
        except OSError:
            continue
        if len(fields) != 2 or fields[0] == "max":
            return None
        try:
            quota, period = map(int, fields)
        except ValueError:
            return None
        # v1 reports an unlimited quota as -1
        if quota <= 0 or period <= 0:
            return None
        return Fraction(quota, period)
    return None


def effective_cpu_count() -> int:
    """
    The number of CPUs this process may actually keep busy,
    honouring a cgroup CPU quota when one is set (rounded up).
    """
    count = os.cpu_count() or 1
    quota = _cpu_quota()
    if quota is None:
        return count
    return max(1, min(count, math.ceil(quota)))


def loader_worker_count(requested: int = 0) -> int:
    """
    Sizes the batch-preparation pool used during training.

    Args:
        requested: An explicit worker count, or 0 to leave one CPU
            for the optimizer thread and use the rest.

    Returns:
        A worker count of at least 1.
    """
    if requested > 0:
        return requested
    return max(1, effective_cpu_count() - 1)
