"""Exception hierarchy shared by every module."""


class UnemoError(Exception):
    """Base class for all package errors."""


class DimensionError(UnemoError, ValueError):
    pass


class DomainError(UnemoError, ValueError):
    pass


class NonFiniteError(UnemoError, ValueError):
    pass


class ConfigError(UnemoError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TrainingError(UnemoError, RuntimeError):
    pass


class GenerationError(UnemoError, RuntimeError):
    pass


class LookupFailure(UnemoError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class UnreachableError(UnemoError, RuntimeError):
    pass


class TransitionError(UnemoError, ValueError):
    pass


class ContractError(UnemoError, ValueError):
    pass


class VocabularyError(UnemoError, ValueError):
    pass


class LabelingError(UnemoError, ValueError):
    pass


class FormatError(UnemoError, ValueError):
    pass
