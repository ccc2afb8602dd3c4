"""Exception types raised across the package."""

from __future__ import annotations


class RfqiError(Exception):
    """Base class; ``code`` is the machine-readable tag used by the CLI and results CSV."""

    code = "error"


class NonFiniteInput(RfqiError, ValueError):
    code = "non_finite_input"


class ConstantColumn(RfqiError, ValueError):
    code = "constant_column"

    def __init__(self, column: int):
        super().__init__(f"design column {column} has (near) zero standard deviation")
        self.column = column


class DidNotConverge(RfqiError, RuntimeError):
    """Coordinate descent hit ``max_iters``; the partial fit is attached as ``fit``."""

    code = "did_not_converge"

    def __init__(self, fit):
        super().__init__(
            f"lasso did not converge after {fit.iterations} sweeps "
            f"(max coefficient change {fit.max_coef_delta_at_exit:.3e})"
        )
        self.fit = fit


class SingularGram(RfqiError, ValueError):
    code = "singular_gram"

    def __init__(self, min_eig: float, t: int | None = None, action: int | None = None):
        where = "" if t is None else f" at t={t}, action={action}"
        super().__init__(f"restricted Gram matrix is singular{where} (min eigenvalue {min_eig:.3e})")
        self.min_eig = min_eig
        self.t = t
        self.action = action


class EmptyActionCell(RfqiError, ValueError):
    code = "empty_action_cell"

    def __init__(self, action: int, t: int, count: int, required: int):
        super().__init__(
            f"only {count} samples for action {action} at t={t} (need at least {required})"
        )
        self.action = action
        self.t = t
        self.count = count
        self.required = required


class InvalidConfig(RfqiError, ValueError):
    code = "invalid_config"


class EmptyTruth(RfqiError, ValueError):
    code = "empty_truth"


class MalformedInput(RfqiError, ValueError):
    code = "malformed_input"

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class UnknownMetric(RfqiError, KeyError):
    code = "unknown_metric"

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown metric"
