class CdlfError(Exception):
    pass


class DimensionError(CdlfError, ValueError):
    pass


class NonFiniteError(CdlfError, ValueError):
    pass


class ConfigurationError(CdlfError):
    def __init__(self, msg, key=None):
        if key is not None:
            msg = "Invalid configuration for {}: {}".format(key, msg)
        super(ConfigurationError, self).__init__(msg)
        self.key = key


class InvalidGateRangeError(ConfigurationError):
    pass


class PanelValidationError(CdlfError):
    """Raised for malformed panel files.

    ``rows`` holds 1-based line numbers in the source file (the header is
    line 1) so the message can point at the offending records.
    """

    def __init__(self, msg, rows=None):
        self.rows = sorted(rows) if rows else []
        if self.rows:
            shown = ", ".join(str(r) for r in self.rows[:20])
            if len(self.rows) > 20:
                shown += ", ..."
            msg = "{} (rows: {})".format(msg, shown)
        super(PanelValidationError, self).__init__(msg)


class StabilityMarginError(CdlfError):
    pass


class EnforcementInfeasibleError(CdlfError):
    def __init__(self, msg, actions=None):
        super(EnforcementInfeasibleError, self).__init__(msg)
        self.actions = actions or []


class TrainingDivergedError(CdlfError):
    def __init__(self, step, last_finite_loss):
        message = (
            "Training diverged at step {}: non-finite loss streak exceeded the "
            "limit (last finite loss {})".format(step, last_finite_loss)
        )
        super(TrainingDivergedError, self).__init__(message)
        self.step = step
        self.last_finite_loss = last_finite_loss


class ArtifactError(CdlfError):
    pass


class StepOutOfRangeError(CdlfError, IndexError):
    def __init__(self, n, steps, lowest=1):
        super(StepOutOfRangeError, self).__init__(
            "diffusion step {} outside {}..{}".format(n, lowest, steps)
        )
        self.n = n


class ReferenceLeakError(CdlfError):
    """A series showed up in its own reference set."""
