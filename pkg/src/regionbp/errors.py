"""Exception hierarchy shared by all engines."""


class RegionBPError(Exception):
    """Base class for all library errors."""


class InputError(RegionBPError, ValueError):
    pass


class GraphParseError(InputError):
    pass


class GraphValidationError(InputError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid factor graph: " + "; ".join(self.violations))


class CapacityError(RegionBPError):
    """A table or enumeration would exceed the configured state-space cap."""


class DegeneracyError(RegionBPError, ArithmeticError):
    """A message or belief update has no support (all weights zero)."""


class PartitionError(InputError):
    pass


class ErgodicityError(RegionBPError):
    pass
