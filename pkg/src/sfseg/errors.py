"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A rejected configuration value; ``field`` names the offending entry."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(ValueError):
    pass


class DependencyError(RuntimeError):
    """A pipeline stage is missing an input artifact."""

    def __init__(self, artifact, stage=None):
        self.artifact = str(artifact)
        self.stage = stage
        where = f" (needed by stage '{stage}')" if stage else ""
        super().__init__(f"missing artifact: {artifact}{where}")


class LockError(RuntimeError):
    """Another run holds the output directory."""
