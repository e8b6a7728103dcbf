"""Exception types shared across the package.

Config and usage mistakes raise ConfigError / ContractError / StateError;
numerical blow-ups raise NumericError (or its SingularError subclass) and
carry enough context to name the offending layer or matrix.
"""


class NfrlError(Exception):
    """Base class for package errors."""


class ConfigError(NfrlError):
    """Invalid or inconsistent configuration value."""


class ContractError(NfrlError):
    """An argument violates an interface contract (shape, dtype, range)."""


class StateError(NfrlError):
    """Operation called in an invalid order (e.g. backward before forward)."""


class NumericError(NfrlError):
    """Non-finite value produced during a computation.

    `where` names the layer / block / quantity that overflowed.
    """

    def __init__(self, where: str, detail: str = ""):
        self.where = where
        msg = f"non-finite value in {where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class SingularError(NumericError):
    """A triangular factor has a diagonal entry too close to zero."""

    def __init__(self, where: str, index: int, value: float):
        self.index = index
        self.value = value
        NfrlError.__init__(
            self, f"singular factor in {where}: |diag[{index}]| = {abs(value):.3e} < 1e-12"
        )


class CheckpointError(NfrlError):
    """Malformed or mismatched checkpoint file."""
