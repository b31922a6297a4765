"""Desk-scale Lipschitz calculus on finite metric measure spaces."""

__version__ = "0.1.0"

from .fields import ScalarField
from .space import (FiniteMetricMeasureSpace, SpaceSpec, ball, doubling_stats,
                    generate_space, lebesgue_density_profile)

__all__ = [
    "__version__",
    "ScalarField",
    "FiniteMetricMeasureSpace",
    "SpaceSpec",
    "ball",
    "doubling_stats",
    "generate_space",
    "lebesgue_density_profile",
]
