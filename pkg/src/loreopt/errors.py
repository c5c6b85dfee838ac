"""Exception hierarchy shared by every loreopt module."""


class LoreOptError(Exception):
    """Base class for all library errors."""


class InvalidInput(LoreOptError, ValueError):
    pass


class DegenerateInput(LoreOptError, ValueError):
    pass


class InvalidRank(LoreOptError, ValueError):
    pass


class ShapeError(LoreOptError, ValueError):
    pass


class NumericalDivergence(LoreOptError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InvalidConstruction(LoreOptError, ValueError):
    pass


class HorizonTooShort(LoreOptError, ValueError):
    pass


class InvalidMetric(LoreOptError, KeyError):
    pass


class ConfigError(LoreOptError, ValueError):
    """Config parse/validation failure; carries the offending line when known."""

    def __init__(self, message, line=None, path=None):
        self.message = message
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class OracleContractViolation(LoreOptError, AssertionError):
    def __init__(self, report):
        self.report = report
        failed = [c for c in report.checks if not c.passed]
        lines = "; ".join(f"{c.name}: {c.detail}" for c in failed)
        super().__init__(f"{report.subject}: {lines}")


class LemmaViolation(LoreOptError, AssertionError):
    def __init__(self, report):
        self.report = report
        failed = [c for c in report.checks if not c.passed]
        lines = "; ".join(f"{c.name}: {c.detail}" for c in failed)
        super().__init__(lines)
