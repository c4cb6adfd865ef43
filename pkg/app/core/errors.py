class LabError(Exception):
    """Base class for errors raised by the level-set laboratory."""


class InvalidInputError(LabError, ValueError):
    pass


class RejectedPlanError(InvalidInputError):
    pass


class ConfigError(LabError):
    pass


class NumericalFlagError(LabError):
    pass


class BoundaryCriticalPointError(NumericalFlagError):
    def __init__(self, face: str, point: tuple[float, ...], grad_norm: float) -> None:
        self.face = face
        self.point = point
        self.grad_norm = grad_norm
        super().__init__(
            f"boundary node on face {face} at {point} has |grad f|={grad_norm:.3e} after jitter"
        )
