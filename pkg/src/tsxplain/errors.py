"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class SingularSystemError(ValueError):
    """Normal equations are rank-deficient; a positive ridge is required."""


class SchemaError(ValueError):
    """Feature schema is malformed or does not match the data."""


class DataError(ValueError):
    """Cohort data violates a structural invariant (range, labels, types)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NotTrainedError(RuntimeError):
    """A trained model was required but none is available."""
