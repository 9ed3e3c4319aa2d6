class InverseRTError(ValueError):
    """Base class for every error raised by django_inverse_rt."""


class SceneError(InverseRTError):
    pass


class MaterialError(InverseRTError):
    pass


class TraceError(InverseRTError):
    pass


class ShapeMismatchError(InverseRTError):
    pass


class NonFiniteLossError(InverseRTError):
    pass


class PlacementError(InverseRTError):
    pass


class PlacementCountError(PlacementError):
    pass


class PlacementBoundsError(PlacementError):
    """Positions that stayed invalid after the repair round-trip."""

    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems)


class VlmError(InverseRTError):
    pass


class VlmConfigurationError(VlmError):
    pass


class VlmTransportError(VlmError):
    pass


class VlmReplayMissError(VlmError):
    pass


class VlmResponseError(VlmError):
    """The model answered, but the answer could not be used.

    ``raw`` keeps the untouched payload so callers can show or store it.
    """

    def __init__(self, message, raw=""):
        super().__init__(message)
        self.raw = raw
