"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit-specific failures."""


class DimensionError(ToolkitError, ValueError):
    """Array shapes are inconsistent with the declared system dimensions."""


class IntegrationError(ToolkitError, RuntimeError):
    """Adaptive integration failed; carries the last time reached."""

    def __init__(self, message: str, t_last: float):
        super().__init__(message)
        self.t_last = t_last


class ObservableDomainError(ToolkitError, ValueError):
    """An observable was evaluated outside its numeric domain."""

    def __init__(self, message: str, observable: str, indices=()):
        super().__init__(message)
        self.observable = observable
        self.indices = tuple(indices)


class DictionarySpecError(ToolkitError, ValueError):
    """A dictionary specification violates the structural requirements."""


class EstimationError(ToolkitError, ValueError):
    """Sampling or regression input is unusable (empty, degenerate, non-finite)."""


class InvarianceError(ToolkitError, RuntimeError):
    """The dictionary span is not invariant under the generator."""


class CertificationError(ToolkitError, RuntimeError):
    """Error-bound certification refused, e.g. for nonconforming observables."""


class MatrixExponentialError(ToolkitError, FloatingPointError):
    """Matrix exponential overflowed or produced non-finite entries."""


class InfeasibleError(ToolkitError, RuntimeError):
    """No feasible control sequence was found for the requested horizon."""


class DegenerateIndexError(ToolkitError, ZeroDivisionError):
    """Suboptimality index denominator vanished for the supplied bounds."""


class ManifestError(ToolkitError, ValueError):
    """An experiment manifest is malformed or incomplete."""


class ContainerFormatError(ToolkitError, ValueError):
    """A generator container file is corrupt or has the wrong layout."""
