from pydantic import BaseModel, ConfigDict


class LabModel(BaseModel):
    model_config = ConfigDict(use_attribute_docstrings=True, frozen=True)


class ResultModel(BaseModel):
    """Result records. Mutable, unlike LabModel: diagnostics are appended after construction."""
    model_config = ConfigDict(use_attribute_docstrings=True, ser_json_inf_nan='constants')


class LabError(Exception):
    """
    Base of every error raised by the lab. The CLI turns exit_code into the process exit status.

    Attributes:
        message: the technical error message
        exit_code: 2 for configuration problems, 3 for resource caps, 4 for numerical/divergence problems
    """
    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigError(LabError):
    exit_code = 2


class ParameterError(ConfigError):
    pass


class DomainError(ConfigError):
    pass


class KernelTruncationError(ConfigError):
    """
    Raised when the analytic tail bound of the truncated kernel exceeds tail_tol.

    Attributes:
        tail_mass: the bound on the discarded mass at the requested radius
        minimal_R: the smallest truncation radius whose bound satisfies tail_tol
    """

    def __init__(self, message: str, tail_mass: float, minimal_R: int):
        super().__init__(message)
        self.tail_mass = tail_mass
        self.minimal_R = minimal_R


class PlotTagError(ConfigError):
    def __init__(self, message: str, valid_tags: list[str]):
        super().__init__(message)
        self.valid_tags = valid_tags


class ResourceCapError(LabError):
    exit_code = 3


class KernelResourceError(ResourceCapError):
    pass


class EnumerationCapError(ResourceCapError):
    pass


class NumericalError(LabError):
    exit_code = 4


class PoleError(NumericalError):
    """
    Attributes:
        k: the wavevector at which |mu * D^(k)| >= 1
        mu: the offending rate
    """

    def __init__(self, message: str, k, mu: complex):
        super().__init__(message)
        self.k = k
        self.mu = mu


class DivergenceError(NumericalError):
    pass


class FitError(NumericalError):
    pass


class BracketError(NumericalError):
    def __init__(self, message: str, slope_low: float, slope_high: float):
        super().__init__(message)
        self.slope_low = slope_low
        self.slope_high = slope_high


class CriticalityError(NumericalError):
    def __init__(self, message: str, ratio: float):
        super().__init__(message)
        self.ratio = ratio
