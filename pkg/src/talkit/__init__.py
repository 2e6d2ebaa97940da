"""Temporal action localisation toolkit.

Supervised track: local/global temporal encoder plus multi-stage boundary
refinement. Weak track: multi-dilated class activation, cascaded erasing,
boundary regression with an outer-inner contrast loss, and trimmed-clip
transfer through maximum mean discrepancy. Everything runs on numpy with a
small reverse-mode autodiff engine.
"""

from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError, FormatError, TalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DegenerateInputError", "DimensionError", "FormatError",
           "TalError", "__version__"]
