"""Exception types shared across the package."""


class FdyLkaError(Exception):
    """Base class; the CLI maps these to exit code 2."""


class DimensionError(FdyLkaError, ValueError):
    """A tensor axis has the wrong size."""


class ContractError(FdyLkaError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(FdyLkaError, ValueError):
    pass


class InputError(FdyLkaError, ValueError):
    pass


class FormatError(FdyLkaError, ValueError):
    """A binary or text file does not follow its declared layout."""


class ParseError(FormatError):
    def __init__(self, message: str, line: int | None = None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class DivergenceError(FdyLkaError, FloatingPointError):
    """A gradient or parameter became NaN or infinite during training."""

    def __init__(self, leaf_id: str):
        super().__init__(f"non-finite gradient in leaf {leaf_id!r}; training aborted")
        self.leaf_id = leaf_id
