"""Shared exception types."""


class ShardPlanError(Exception):
    """Base class for all planner/simulator errors."""


class SpecError(ShardPlanError):
    """A model, machine, or vision spec violates its invariants."""


class InfeasibleBudget(ShardPlanError):
    """The VRAM budget cannot host even the minimum working set.

    Carries the budget and the smallest number of bytes that would have
    been required, so callers can report the shortfall.
    """

    def __init__(self, budget_bytes: float, required_bytes: float, what: str = "scratch"):
        self.budget_bytes = budget_bytes
        self.required_bytes = required_bytes
        self.what = what
        short = required_bytes - budget_bytes
        super().__init__(
            f"VRAM budget {budget_bytes / 1e6:.1f} MB is short {short / 1e6:.1f} MB "
            f"of the {required_bytes / 1e6:.1f} MB needed for {what}"
        )


class InfeasibleSchedule(ShardPlanError):
    """A schedule plan cannot execute under the machine's VRAM constraints."""


class FormatError(ShardPlanError):
    """A persisted file has an unknown version or a malformed body."""
