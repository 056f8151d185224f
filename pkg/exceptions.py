from typing import Optional


class WorldModelError(Exception):
    """Base error for every contract violation raised by the pipeline."""

    code = "world_model_error"

    def __init__(self, detail: str, code: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        if code is not None:
            self.code = code

    def error_line(self) -> str:
        detail = " ".join(self.detail.split())
        return f"error code={self.code} type={type(self).__name__} detail={detail}"


class DimensionError(WorldModelError):
    code = "dimension"


class ConfigurationError(WorldModelError):
    code = "configuration"


class DataError(WorldModelError):
    code = "data"


class ParseError(DataError):
    code = "parse"

    def __init__(self, detail: str, offset: int):
        super().__init__(f"{detail} (byte offset {offset})")
        self.offset = offset


class StateError(WorldModelError):
    code = "state"


class GenerationError(WorldModelError):
    code = "generation"


class MissingArtifactError(WorldModelError):
    code = "missing_artifact"

    def __init__(self, path):
        super().__init__(f"expected file not found: {path}")
        self.path = str(path)
