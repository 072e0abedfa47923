"""Shared exception types."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (bad shape, range, plan)."""


class DependencyError(FileNotFoundError):
    """A pipeline stage is missing an artifact a previous stage produces."""


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""
