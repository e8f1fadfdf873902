"""Exception types shared across the package.

Three failure families are distinguished so callers (and the CLI exit-code
mapping) can react without string matching:

* ``ShapeMismatchError``  -- two operands that must agree in shape do not.
* ``ConfigurationError``  -- a parameter/flag value is structurally invalid
  (even PSF size, negative noise variance, non-integral conv output, ...).
* ``ContractError``       -- an API precondition was violated at call time
  (non-scalar loss, empty sequence, missing gradient, ...).
* ``DataError``           -- input files/directories are unreadable or
  inconsistent (unpaired sequences, frame count mismatch).
* ``VerificationError``   -- a self-check (gradient verification) failed.
"""


class UdcvrError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(UdcvrError, ValueError):
    pass


class ConfigurationError(UdcvrError, ValueError):
    pass


class ContractError(UdcvrError, ValueError):
    pass


class DataError(UdcvrError, ValueError):
    pass


class VerificationError(UdcvrError, RuntimeError):
    pass
