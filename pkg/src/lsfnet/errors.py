"""Exception types shared by the readers, the trainer and the CLI."""


class LSFError(Exception):
    """Base class for all package errors."""


class FormatError(LSFError, ValueError):
    """A file does not follow its binary or text layout."""


class DataError(LSFError, ValueError):
    """Inputs are well-formed but violate a contract (labels, widths, empty sets)."""


class DivergenceError(LSFError, ArithmeticError):
    """Training produced a non-finite loss."""


def check_magic(path, found: bytes, expected: bytes) -> None:
    if found != expected:
        raise FormatError(
            f"{path}: bad magic {found!r}, expected {expected.decode('ascii')!r}"
        )
