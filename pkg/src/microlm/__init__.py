"""microlm: train, compress, and cost-score a small windowed transformer LM.

The package covers the full pipeline on one desk-scale budget: byte-level
corpus handling, a tape-based autograd core on numpy, a windowed
relative-position transformer with an adaptive tied embedding/softmax and
a differentiable token cache, knowledge distillation, magnitude pruning on
sensitivity-derived targets, symmetric linear quantization, and an
arithmetic scorer that reports parameter storage and per-token operation
counts against fixed normalizers.

Hot kernels are numba-jitted with a pure-numpy fallback; set
MICROLM_NUMBA=0 to force the fallback.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, InputError, NumericalError

__all__ = [
    "ConfigError",
    "ContractError",
    "InputError",
    "NumericalError",
    "__version__",
]
