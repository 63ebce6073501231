from typing import Optional

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class CmkdError(Exception):
    """Base error; `exit_code` is what the CLI returns for it."""

    exit_code: int = EXIT_RUNTIME

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(CmkdError):
    exit_code = EXIT_USAGE


class ShapeError(CmkdError):
    pass


class NumericalError(CmkdError):
    pass


class TapeError(CmkdError):
    pass


class DataError(CmkdError):
    pass


class DataFormatError(DataError):
    def __init__(self, detail: str, line: Optional[int] = None):
        if line is not None:
            detail = f"line {line}: {detail}"
        super().__init__(detail)
        self.line = line


class CheckpointError(CmkdError):
    pass


class TrainingError(CmkdError):
    pass


class FoldError(CmkdError):
    def __init__(self, fold: int, cause: CmkdError):
        super().__init__(f"fold {fold}: {cause.detail}", exit_code=cause.exit_code)
        self.fold = fold
        self.cause = cause
