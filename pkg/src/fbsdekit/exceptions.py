"""Exception types shared across the toolkit."""


class FbsdeError(RuntimeError):
    """Base class for runtime failures raised by fbsdekit."""


class IntegrationFailure(FbsdeError):
    """ODE integration produced a non-finite state."""

    def __init__(self, t, message=None):
        self.t = float(t)
        super().__init__(message or f"integration blew up at t={self.t:.6g}")


class SimulationFailure(FbsdeError):
    """SDE simulation produced a non-finite state at step n, path b."""

    def __init__(self, n, b, message=None):
        self.n = int(n)
        self.b = int(b)
        super().__init__(message or f"non-finite state at step n={n}, path b={b}")


class SingularImplicitStep(FbsdeError):
    """The implicit division in the cosine backward step is near-singular."""

    def __init__(self, n, denom):
        self.n = int(n)
        self.denom = float(denom)
        super().__init__(
            f"implicit step at n={n} is singular: |1 - E[dW df/dz]| = {denom:.3e}"
        )


class TrainingDivergence(FbsdeError):
    """Too many consecutive non-finite losses during a stage regression."""

    def __init__(self, stage, message=None):
        self.stage = int(stage)
        super().__init__(message or f"training diverged at stage n={stage}")


class EvaluationFailure(FbsdeError):
    """A network evaluation produced non-finite output."""


class NonFiniteGradient(FbsdeError):
    """An optimizer update was rejected because a gradient was non-finite."""

    def __init__(self, param_index, message=None):
        self.param_index = int(param_index)
        super().__init__(
            message or f"non-finite gradient for parameter block {param_index}"
        )


class UnsupportedOperationError(FbsdeError):
    """The requested operation is not available for this model."""


class ConfigError(ValueError):
    """Invalid experiment configuration; carries the offending key path."""

    def __init__(self, key_path, message):
        self.key_path = key_path
        super().__init__(f"[{key_path}] {message}")
