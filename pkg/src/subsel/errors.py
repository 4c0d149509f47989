"""Exception types shared across the package."""


class SubselError(Exception):
    """Base class for package-specific failures."""


class ConfigError(SubselError, ValueError):
    """An experiment configuration failed validation."""


class InvalidActionError(SubselError, ValueError):
    """An action targeted a cluster that is already selected."""


class EpisodeFinishedError(SubselError, RuntimeError):
    """A terminal state was stepped."""


class OracleError(SubselError, RuntimeError):
    """A reward oracle could not produce a value (transport, protocol, or
    process failure). Never swallowed into a silent zero reward."""


class CapabilityError(OracleError):
    """The oracle does not support the requested evaluation kind."""


class UpdateRejectedError(SubselError, RuntimeError):
    """An optimizer step was refused because the gradients were not finite."""
