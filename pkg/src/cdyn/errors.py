"""Exception taxonomy shared across the package.

ValidationError maps to CLI exit code 1 (bad inputs, malformed files,
out-of-contract arguments). ComputeError maps to exit code 2 (numerical
failures at runtime: non-finite gradients, non-convergent iterations).
"""


class CdynError(Exception):
    pass


class ValidationError(CdynError):
    pass


class ComputeError(CdynError):
    pass
