"""Exception hierarchy shared by the simulator, experiments and CLI."""


class FedISLError(Exception):
    pass


class DomainError(FedISLError, ValueError):
    """An input is outside the domain an operation is defined on."""


class InfeasibleLinkError(DomainError):
    pass


class DivergedError(FedISLError, ArithmeticError):
    """Local training produced a non-finite loss."""


class ProtocolError(FedISLError, RuntimeError):
    """A message or aggregate violates the aggregation protocol."""


class PlanningError(FedISLError, RuntimeError):
    """No satellite can reach the parameter server within the search horizon."""


class DeadlockError(FedISLError, RuntimeError):
    def __init__(self, message: str, states: dict | None = None):
        super().__init__(message)
        self.states = states or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.states:
            return base
        lines = [base] + [f"  {k}: {v}" for k, v in sorted(self.states.items())]
        return "\n".join(lines)


class ConfigError(FedISLError, ValueError):
    """Scenario file could not be parsed or validated.

    ``diagnostics`` holds ``(location, message)`` pairs, where location is a
    dotted field path or ``line:col`` for syntax errors.
    """

    def __init__(self, message: str, diagnostics: list[tuple[str, str]] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        return "\n".join([base] + [f"  {loc}: {msg}" for loc, msg in self.diagnostics])
