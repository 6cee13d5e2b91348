"""Exception types raised across the package."""


class ProbPromptError(Exception):
    """Base class for all package errors."""


class _KeyMessage(KeyError):
    # KeyError quotes its message by default; show it verbatim instead
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DimensionError(ProbPromptError, ValueError):
    pass


class EmptyContextError(ProbPromptError, ValueError):
    pass


class EmptyInputError(ProbPromptError, ValueError):
    pass


class StateError(ProbPromptError, RuntimeError):
    pass


class DeterminismError(ProbPromptError, RuntimeError):
    pass


class VocabularyError(ProbPromptError, _KeyMessage):
    pass


class CategoryError(ProbPromptError, _KeyMessage):
    pass


class SizeError(ProbPromptError, ValueError):
    pass


class ParseError(ProbPromptError, ValueError):
    def __init__(self, message, line=None, field=None):
        parts = [message]
        if line is not None:
            parts.append(f"line {line}")
        if field is not None:
            parts.append(f"field {field!r}")
        super().__init__(": ".join(parts) if len(parts) == 1 else f"{message} ({', '.join(parts[1:])})")
        self.line = line
        self.field = field


class NonFiniteError(ProbPromptError, ValueError):
    pass


class DegenerateError(ProbPromptError, ValueError):
    """A quantity needed for normalization or a ratio is exactly zero."""


class GeometryError(ProbPromptError, ValueError):
    pass


class ConfigError(ProbPromptError, ValueError):
    pass


class NormalizationError(DimensionError):
    pass


class DomainError(ProbPromptError, ValueError):
    pass


class ClusterCountError(ProbPromptError, ValueError):
    pass


class EmbeddingKeyError(ProbPromptError, _KeyMessage):
    """An embedding key is not of the form ``<scene_id>/<roi_id>``."""
