"""
Exceptions shared by every stage of the pipeline. Each carries a short
machine-readable code that the CLI reports in its JSON error payload.
"""
from typing import Any, Dict, Optional


class PoeVaeError(Exception):
    code = "error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": self.message, "details": self.details}


class ConfigError(PoeVaeError, ValueError):
    code = "config_error"


class DatasetError(PoeVaeError):
    code = "dataset_error"


class DimensionError(PoeVaeError, ValueError):
    code = "dimension_error"


class CheckpointError(PoeVaeError):
    code = "checkpoint_error"


class TrainingError(PoeVaeError):
    code = "training_error"


class EvaluationError(PoeVaeError):
    code = "evaluation_error"
