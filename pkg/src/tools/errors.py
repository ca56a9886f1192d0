class StgnnError(ValueError):
    """Base class for every error raised by the fault-location pipeline."""


class FeederParseError(StgnnError):
    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class FeederSemanticError(StgnnError):
    pass


class SwitchOperationError(StgnnError):
    pass


class GraphConstructionError(StgnnError):
    def __init__(self, message: str, bus: str | None = None):
        self.bus = bus
        super().__init__(message)


class ShapeError(StgnnError):
    pass


class SchemaError(StgnnError):
    def __init__(self, message: str, row_number: int | None = None, column: str | None = None):
        self.row_number = row_number
        self.column = column
        if row_number is not None:
            message = f"row {row_number}: {message}"
        super().__init__(message)


class CheckpointError(StgnnError):
    pass


class ConfigError(StgnnError):
    pass
