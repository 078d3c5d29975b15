"""Exception types shared by the numerical library.

Controllers catch ErgodicError and turn it into an error message; everything
else is a bug and is allowed to propagate.
"""


class ErgodicError(Exception):
    """Base class for every expected failure of the library."""


class NumericalFailure(ErgodicError, ArithmeticError):
    """A value or adjoint became NaN/Inf.

    Carries whatever location information the raising layer knows about:
    the record operation index, the leapfrog iteration, the chain (row) and
    the transition step, or the training iteration.
    """

    def __init__(self, message, op_index=None, iteration=None, chain=None, step=None, lane=None):
        self.op_index = op_index
        self.iteration = iteration
        self.chain = chain
        self.step = step
        self.lane = lane
        super().__init__(message)

    def located(self, **where):
        """Return a copy with extra location fields filled in."""
        fields = {
            "op_index": self.op_index,
            "iteration": self.iteration,
            "chain": self.chain,
            "step": self.step,
            "lane": self.lane,
        }
        fields.update({k: v for k, v in where.items() if v is not None})
        parts = [f"{k}={v}" for k, v in fields.items() if v is not None]
        base = str(self).split(" [")[0]
        return NumericalFailure(f"{base} [{', '.join(parts)}]", **fields)


class RegistryError(ErgodicError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown registry entry"


class DimensionMismatch(ErgodicError, ValueError):
    pass


class EntropyUnavailable(ErgodicError, LookupError):
    pass


class ConfigError(ErgodicError, ValueError):
    """Invalid configuration; ``fields`` lists every offending field."""

    def __init__(self, message, fields=None):
        self.fields = list(fields or [])
        super().__init__(message)


class OracleError(ErgodicError, RuntimeError):
    pass
