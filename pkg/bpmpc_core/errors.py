from __future__ import annotations


class BpmpcError(Exception):
    """bpmpc 例外基底類別。"""


class DimensionError(BpmpcError, ValueError):
    pass


class IndexRangeError(BpmpcError, IndexError):
    pass


class ParameterInfeasibleError(BpmpcError, ValueError):
    pass


class ConfigError(BpmpcError, ValueError):
    pass


class CertificationError(BpmpcError, RuntimeError):
    pass


class DivergenceError(BpmpcError, RuntimeError):
    pass


class NonFiniteError(BpmpcError, FloatingPointError):
    pass
