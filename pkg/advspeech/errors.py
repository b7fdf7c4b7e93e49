class AdvSpeechError(ValueError):
    """Base error. `module` names the component that raised it (used by the CLI error line)."""

    module = "advspeech"

    def __init__(self, message: str, module: str | None = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    @property
    def message(self) -> str:
        return str(self.args[0]) if self.args else ""


class ParameterError(AdvSpeechError):
    pass


class ShapeError(AdvSpeechError):
    pass


class ContractError(AdvSpeechError):
    pass


class TooShortError(AdvSpeechError):
    pass


class FormatError(AdvSpeechError):
    pass


class InfeasibleAlignmentError(AdvSpeechError):
    pass


class ConfigurationError(AdvSpeechError):
    pass


class InfiniteSnrError(AdvSpeechError):
    """The perturbation has zero power."""


class SilentReferenceError(AdvSpeechError):
    pass


class InsufficientModulationError(AdvSpeechError):
    pass


class MetricError(AdvSpeechError):
    """A member metric failed inside a report; `field` names which one."""

    def __init__(self, field: str, cause: Exception):
        super().__init__(f"{field}: {cause}", module="metrics")
        self.field = field
        self.cause = cause
