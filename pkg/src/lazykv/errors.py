"""Exception types shared across the package.

Two categories, matching the CLI exit codes: bad user input (exit 1) and
violated internal contracts / failed verification (exit 2).
"""


class InputError(ValueError):
    """Caller-supplied data is unusable (bad token ids, empty corpus, ...)."""


class ContractViolation(RuntimeError):
    """An API precondition or internal invariant was broken."""
