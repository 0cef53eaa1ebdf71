from typing import Any, Dict


class CavityError(Exception):
    """Base class of every domain error; rendered as JSON by the CLI."""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": self.message, "details": self.details}


class ParameterError(CavityError, ValueError):
    pass


class UnsupportedModelError(CavityError):
    pass


class DegeneratePopulationError(CavityError):
    pass


class DegenerateMessageError(CavityError):
    pass


class InfeasibleTruthError(CavityError):
    pass


class BudgetExceededError(CavityError):
    pass
