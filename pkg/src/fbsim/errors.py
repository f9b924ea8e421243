"""Exception types raised across the package."""


class FbsimError(Exception):
    pass


class ConfigError(FbsimError, ValueError):
    """Invalid configuration values or unknown configuration keys."""


class ShapeError(FbsimError, ValueError):
    pass


class ContractError(FbsimError, RuntimeError):
    """A function was called with state that violates its precondition."""


class DegenerateInputError(FbsimError, ValueError):
    pass


class NumericError(FbsimError, ArithmeticError):
    """Non-finite values appeared during training.

    ``context`` carries diagnostics (round, client, step) when known.
    """

    def __init__(self, message, **context):
        self.context = dict(context)
        if context:
            details = ", ".join(f"{k}={v}" for k, v in sorted(context.items()))
            message = f"{message} ({details})"
        super().__init__(message)


class ProtocolError(FbsimError, RuntimeError):
    """Server/client exchange is incomplete or inconsistent."""


class ContainerError(FbsimError, OSError):
    """Malformed, truncated or version-mismatched binary container."""
