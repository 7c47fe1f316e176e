from typing import Any, Dict, Optional


class IvGapError(Exception):
    """Base error with a machine-readable code; to_dict gives the {error, message, ...detail} record logged on failure"""

    code = "ivgap_error"

    def __init__(self, message: str, detail: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.detail = detail or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": self.message, **self.detail}


class UserInputError(IvGapError):
    code = "user_error"


class SchemaError(UserInputError):
    code = "schema_error"


class IngestionError(UserInputError):
    code = "ingestion_error"


class ConfigError(UserInputError):
    code = "config_error"


class FrameError(UserInputError):
    code = "frame_error"


class NumericalError(IvGapError):
    code = "numerical_error"


class RankError(NumericalError):
    code = "rank_error"

    def __init__(self, message: str, columns=None):
        super().__init__(message, {"columns": list(columns or [])})
        self.columns = list(columns or [])


class RelevanceError(NumericalError):
    code = "relevance_error"

    def __init__(self, message: str, first_stage_f: Optional[float] = None):
        super().__init__(message, {"first_stage_f": first_stage_f})
        self.first_stage_f = first_stage_f


class DegenerateTreatmentError(NumericalError):
    code = "degenerate_treatment"


class VcovError(NumericalError):
    code = "vcov_error"


class SupportError(NumericalError):
    code = "support_error"
