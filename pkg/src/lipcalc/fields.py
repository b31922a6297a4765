"""Scalar fields: one real value per point of a space."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .space import FiniteMetricMeasureSpace

__all__ = ["ScalarField"]


@dataclass
class ScalarField:
    """Per-point real values over a fixed space (the discrete Lipschitz function)."""

    space: FiniteMetricMeasureSpace
    values: np.ndarray
    name: str = field(default="")

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.space.n,):
            raise ValueError(
                f"field needs {self.space.n} values, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @staticmethod
    def from_callable(space, fn, name: str = "") -> "ScalarField":
        """Evaluate `fn` on ambient coordinates (vectorised over rows)."""
        if space.ambient_coords is None:
            raise ValueError("from_callable needs ambient coordinates")
        vals = np.asarray([fn(x) for x in space.ambient_coords], dtype=float)
        return ScalarField(space, vals, name=name)

    def same_space(self, other: "ScalarField") -> bool:
        return self.space is other.space or (
            self.space.point_ids == other.space.point_ids
        )

    def __getitem__(self, point) -> float:
        return float(self.values[self.space.index_of(point)])
