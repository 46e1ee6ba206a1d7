"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """An array argument has the wrong rank or extent; names the offending axis."""


class DataFormatError(ValueError):
    """A file or directory does not conform to one of the on-disk formats."""


def require(cond, message):
    if not cond:
        raise ShapeError(message)
