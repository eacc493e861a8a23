"""Exception types raised across the package."""


class DeformPrimError(Exception):
    """Base class for all package errors."""


class DegenerateTaper(DeformPrimError):
    """Tapering factor vanishes, so the global deformation cannot be inverted."""


class UnstableField(DeformPrimError):
    """A scaling-and-squaring substep moves points by more than one grid cell."""


class NonUnitQuaternion(DeformPrimError):
    pass


class EmptyAssignment(DeformPrimError):
    """A primitive owns no target points."""


class DegenerateTarget(DeformPrimError):
    pass


class EmptySet(DeformPrimError):
    pass


class EmptyUnion(DeformPrimError):
    pass


class ParseError(DeformPrimError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyShape(DeformPrimError):
    pass


class SchemaVersionMismatch(DeformPrimError):
    pass


class UnknownGenerator(DeformPrimError):
    pass
