from . import (
    _exceptions,
    attention,
    bench,
    data,
    metrics,
    model,
    ops,
    serialization,
    ssm,
    train,
    utils,
)
from ._exceptions import *
from ._version import __version__
from .model import *
from .serialization import *

__all__ = [
    *_exceptions.__all__,
    *model.__all__,
    *serialization.__all__,
    "attention",
    "bench",
    "data",
    "metrics",
    "ops",
    "ssm",
    "train",
    "utils",
]
