"""Exception types shared across the package."""


class MfgflowError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(MfgflowError):
    """Operands of a graph primitive have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class NumericalError(MfgflowError):
    """A computation produced non-finite values or diverged."""


class SchemaError(MfgflowError):
    """A serialized object violates its schema."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class DataFormatError(MfgflowError):
    """A data file is malformed (bad magic, truncated payload, ...)."""


class DimensionMismatchError(MfgflowError):
    """Model, scene, and data dimensions disagree."""


class UnknownSceneError(MfgflowError):
    def __init__(self, name: str, valid):
        self.name = name
        super().__init__(f"unknown scene {name!r}; valid names: {', '.join(sorted(valid))}")
