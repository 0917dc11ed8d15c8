from typing import Optional

__all__ = [
    "BiMambaError",
    "ShapeError",
    "NonFiniteError",
    "ContractError",
    "ParseError",
    "UndefinedMetricError",
    "DegenerateTestError",
    "InsufficientDataError",
    "ConfigError",
    "CheckpointMismatchError",
    "NumericalFailure",
]


class BiMambaError(Exception):
    pass


class ShapeError(BiMambaError, ValueError):
    pass


class NonFiniteError(BiMambaError, ArithmeticError):
    pass


class ContractError(BiMambaError):
    pass


class ParseError(BiMambaError, ValueError):
    offset: Optional[int]

    def __init__(self, *args, offset: Optional[int] = None):
        super().__init__(*args)
        self.offset = offset


class UndefinedMetricError(BiMambaError, ValueError):
    pass


class DegenerateTestError(BiMambaError):
    auc_a: float
    auc_b: float

    def __init__(self, *args, auc_a: float, auc_b: float):
        super().__init__(*args)
        self.auc_a = auc_a
        self.auc_b = auc_b


class InsufficientDataError(BiMambaError, ValueError):
    pass


class ConfigError(BiMambaError, ValueError):
    pass


class CheckpointMismatchError(BiMambaError):
    pass


class NumericalFailure(BiMambaError, ArithmeticError):
    batch_index: Optional[int]

    def __init__(self, *args, batch_index: Optional[int] = None):
        super().__init__(*args)
        self.batch_index = batch_index
