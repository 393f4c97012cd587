"""Exception types shared across the package."""


class CovregError(Exception):
    """Base class for every error raised by covreg."""


class DimensionMismatch(CovregError, ValueError):
    pass


class NotPositiveDefinite(CovregError):
    def __init__(self, lam_min, index=None, msg=None):
        self.lam_min = float(lam_min)
        self.index = index
        if msg is None:
            where = "" if index is None else f" at observation {index}"
            msg = f"matrix not positive definite{where} (min eigenvalue {self.lam_min:.3e})"
        super().__init__(msg)


class SingularResolvent(CovregError):
    def __init__(self, index=None):
        self.index = index
        super().__init__(f"I - beta*X is numerically singular (observation {index})")


class Underdetermined(CovregError):
    pass


class NotConverged(CovregError):
    def __init__(self, beta, grad_norm, iters):
        self.beta = beta
        self.grad_norm = float(grad_norm)
        self.iters = iters
        super().__init__(
            f"optimizer did not converge in {iters} iterations (gradient norm {grad_norm:.3e})"
        )


class SingularNormalEquations(CovregError):
    def __init__(self, cond):
        self.cond = float(cond)
        super().__init__(f"normal equations are singular (condition number {cond:.3e})")


class SingularGram(CovregError):
    def __init__(self, cond, fold=None):
        self.cond = float(cond)
        self.fold = fold
        where = "" if fold is None else f" in fold {fold}"
        super().__init__(f"Gram matrix singular{where} (condition number {cond:.3e})")


class SingularVhat(CovregError):
    """The K x K matrix inverted by a sandwich estimator is ill-conditioned."""

    def __init__(self, cond, which="V_hat"):
        self.cond = float(cond)
        self.which = which
        super().__init__(f"{which} is singular (condition number {cond:.3e})")


class FoldFailed(CovregError):
    def __init__(self, fold, cause):
        self.fold = fold
        self.cause = cause
        super().__init__(f"leave-one-out fold {fold} failed: {cause}")


class NonPsdCustomWeight(CovregError):
    pass


class ConstraintInfeasible(CovregError):
    pass


class ConfigError(CovregError, ValueError):
    """Invalid user configuration; ``field`` names the offending entry."""

    def __init__(self, field, msg):
        self.field = field
        super().__init__(f"{field}: {msg}")


class StudyFailed(CovregError):
    def __init__(self, failures, reps):
        self.failures = failures
        self.reps = reps
        super().__init__(f"{failures} of {reps} replications failed (limit 5%)")
