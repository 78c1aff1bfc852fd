"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with arguments that break its preconditions."""


class DegenerateLightError(ValueError):
    """An effective-light channel integrates to zero and cannot normalize anything."""


class EmptyInputError(ValueError):
    """Every pixel of the input is masked out; nothing to process."""


class ValidationError(ValueError):
    """A config file or persisted artifact failed schema/consistency checks."""
