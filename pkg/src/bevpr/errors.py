class ConfigurationError(ValueError):
    """Inputs are individually valid but inconsistent with each other."""


class DataError(ValueError):
    """A file or record on disk is missing, malformed or violates an invariant."""
