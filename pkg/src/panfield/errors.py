"""Exception hierarchy.  Every error carries a short machine-readable kind."""


class PanfieldError(Exception):
    kind = "error"


class LoadError(PanfieldError):
    kind = "load"


class WriteError(PanfieldError):
    kind = "write"


class ValidationError(PanfieldError):
    kind = "validation"


class DomainError(PanfieldError, ValueError):
    kind = "domain"


class CapacityError(PanfieldError, ValueError):
    kind = "capacity"


class NumericFault(PanfieldError, FloatingPointError):
    kind = "numeric"


class UsageError(PanfieldError, RuntimeError):
    kind = "usage"


class ContractError(PanfieldError):
    kind = "contract"


class ParseError(PanfieldError, ValueError):
    kind = "parse"
