"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree with a model or detector layout."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ConfigError(ValueError):
    """A configuration object violates its invariants."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class DegenerateLabelsError(ValueError):
    """Binary targets contain a single class."""


class AlignmentError(ValueError):
    """Score vectors or tables are keyed on different sample sets."""


class IncompleteTableError(KeyError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(map(str, self.missing[:10]))
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"perturbation table is missing entries: {shown}{more}")


class FormatError(ValueError):
    """A data file does not follow its declared byte layout."""


class ProvenanceError(RuntimeError):
    """Artifacts from different configurations or splits were mixed."""


class BudgetViolation(AssertionError):
    """An attack returned a perturbation outside its l-inf ball or the input box."""
