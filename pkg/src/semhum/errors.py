"""Error taxonomy shared across modules.

ValidationError: malformed inputs (bad manifests, corrupt images,
out-of-range labels).  CLI exit code 2.
NumericalAbort: non-finite values during optimization.  CLI exit code 3.
"""


class ValidationError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    pass
