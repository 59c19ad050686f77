"""Exception types shared across the package."""


class TbAttrError(Exception):
    """Base class for all package errors."""


class ShapeError(TbAttrError):
    """Tensor or grid shape violates an operation's contract."""


class ConfigError(TbAttrError):
    """Invalid configuration key, value, or combination."""


class MissingLevel(TbAttrError):
    """A required pyramid level is absent."""


class MissingFile(TbAttrError):
    """A referenced file does not exist."""


class MalformedRecord(TbAttrError):
    """A manifest line failed to parse or validate.

    `line` is the 1-based line number in the manifest file, or None when
    the record did not come from a file.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyManifest(TbAttrError):
    """Manifest contains no records (overall or for a required split)."""


class InvalidSize(TbAttrError):
    """Requested image size is not supported by the generator."""


class DegenerateBox(TbAttrError):
    """Box has non-positive width or height."""


class OutOfRange(TbAttrError):
    """Scalar argument outside its documented range."""


class EmptyBatch(TbAttrError):
    """A training step received no samples."""


class EmptyList(TbAttrError):
    """An aggregation received no values."""


class MalformedLog(TbAttrError):
    """A metrics log does not match the expected CSV schema."""


class MissingBaseline(TbAttrError):
    """Ablation report input lacks the mandatory baseline row."""


class OutputsExist(TbAttrError):
    """Command outputs already exist and --overwrite was not given."""
