"""Exception types shared across the package."""


class EvorecError(Exception):
    pass


class ShapeError(EvorecError, ValueError):
    """A tensor had the wrong shape; ``name`` identifies which one."""

    def __init__(self, name, expected, got):
        self.name = name
        self.expected = expected
        self.got = got
        super().__init__(f"{name}: expected shape {expected}, got {got}")


class EmptyPrefixError(EvorecError, ValueError):
    pass


class NonFiniteError(EvorecError, FloatingPointError):
    def __init__(self, what, where=None):
        self.what = what
        self.where = where
        msg = f"non-finite value in {what}"
        if where:
            msg += f" ({where})"
        super().__init__(msg)


class DataFormatError(EvorecError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}" if loc else f"line {line}"
        super().__init__(f"{loc}: {message}" if loc else message)


class SplitError(EvorecError, ValueError):
    pass
