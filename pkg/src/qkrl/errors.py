"""Exception hierarchy shared across the package."""


class QkrlError(Exception):
    """Base class for every error raised by this package."""


class ContractError(QkrlError, ValueError):
    """A documented precondition of an operation was violated."""


class RangeError(ContractError):
    """A value falls outside the representable fixed-point range."""


class ConfigError(QkrlError, ValueError):
    """An experiment configuration, layout or MDP file is invalid."""


class BudgetError(QkrlError, RuntimeError):
    """A query budget or resource cap would be exceeded."""


class ConsistencyError(QkrlError, RuntimeError):
    """Two independent computations of the same quantity disagree."""
