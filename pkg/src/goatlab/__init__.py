"""Desk-scale toolkit for SVD-seeded LoRA mixtures of experts.

Modules: ``numkit`` (matrices, SVD, seeded randomness), ``svdseg``
(spectrum segments and expert initialisation), ``moe`` (the layer, router
and gradients), ``align`` (alignment with full fine-tuning and Monte-Carlo
checks), ``costmodel`` (parameter and FLOP counts) and ``cli``.
"""

from .errors import ConfigError, ContractError, DomainError, GoatError, NumericError, RunError, ShapeError
from .numkit import Rng, svd
from .moe import GoatLayer, build_goat_layer

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DomainError", "GoatError", "NumericError", "RunError", "ShapeError",
    "Rng", "svd", "GoatLayer", "build_goat_layer", "__version__",
]
