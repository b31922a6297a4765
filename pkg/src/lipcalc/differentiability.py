"""Charts, differentials, first-order residuals and two-sided slope control.

A chart carries coordinate fields xi: X -> R^n defined on the whole space.
The differential of f at x is estimated by local least squares over a ball;
its quality is judged by the residual profile

    res(r) = max_{y in B(x,r)} |f(y) - f(x) - Df(x).(xi(y) - xi(x))| / r

which vanishes at all scales exactly when f is linear in the coordinates.
The module also measures the per-point comparability constant between |df|
(a derivation tuple applied to f) and the pointwise slope of f, and the
direction-minimum slope constant K(x) with its dyadic subchart partition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .derivations import StencilDerivation
from .fields import ScalarField
from .lipschitz import global_lip, pointwise_lip_profile
from .space import FiniteMetricMeasureSpace, ball_cut

__all__ = [
    "Chart",
    "DegenerateCoordinatesError",
    "estimate_differential",
    "DifferentialField",
    "estimate_differential_field",
    "ResidualProfile",
    "residual_profile",
    "LipDerivStats",
    "lipderiv_check",
    "ChartConstant",
    "chart_lower_constant",
    "subchart_partition",
    "sphere_directions",
]


class DegenerateCoordinatesError(ValueError):
    """Coordinate increments do not span R^n; carries the degenerate direction."""

    def __init__(self, message, direction):
        super().__init__(message)
        self.direction = np.asarray(direction, dtype=float)


@dataclass
class Chart:
    """Point subset with coordinate fields defined on the ambient space."""

    space: FiniteMetricMeasureSpace
    indices: np.ndarray
    coords: list            # ScalarFields xi^1..xi^n
    name: str = ""
    _lip: float | None = field(default=None, repr=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=int)
        if any(c.space.point_ids != self.space.point_ids and c.space is not self.space
               for c in self.coords):
            raise ValueError("coordinate fields must live on the chart's space")

    @property
    def dim(self) -> int:
        return len(self.coords)

    def coord_matrix(self) -> np.ndarray:
        return np.stack([c.values for c in self.coords], axis=1)

    def coord_lip(self) -> float:
        """Lipschitz constant of the vector map xi (Euclidean target norm)."""
        if self._lip is None:
            xi = self.coord_matrix()
            space = self.space
            best = 0.0
            for lo in range(0, space.n, 256):
                hi = min(lo + 256, space.n)
                rows = np.vstack([space.dist_row(i) for i in range(lo, hi)])
                diff = np.linalg.norm(xi[None, :, :] - xi[lo:hi, None, :], axis=2)
                with np.errstate(divide="ignore", invalid="ignore"):
                    slopes = np.where(rows > 0, diff / rows, 0.0)
                best = max(best, float(slopes.max()))
            self._lip = best
        return self._lip


def estimate_differential(f: ScalarField, chart: Chart, x, scale: float,
                          tol: float = 1e-8) -> np.ndarray:
    """Least-squares differential of f at x over the ball B(x, scale).

    Minimises sum over the ball of (f(y) - f(x) - v.(xi(y) - xi(x)))^2.
    Needs at least dim+1 ball points; raises DegenerateCoordinatesError when
    the coordinate increments are rank deficient at the tolerance, naming the
    flat direction.
    """
    space = f.space
    i = space.index_of(x)
    idx = space.ball_indices(i, scale)
    if idx.size < chart.dim + 1:
        raise ValueError(
            f"ball at scale {scale:g} holds {idx.size} points, need {chart.dim + 1}")
    xi = chart.coord_matrix()
    dxi = xi[idx] - xi[i]
    df = f.values[idx] - f.values[i]
    u_svd, s_svd, vt = np.linalg.svd(dxi, full_matrices=False)
    if s_svd[0] == 0 or s_svd[-1] <= tol * s_svd[0]:
        raise DegenerateCoordinatesError(
            "coordinate increments are rank deficient over the ball",
            direction=vt[-1],
        )
    v, *_ = np.linalg.lstsq(dxi, df, rcond=None)
    return v


@dataclass
class DifferentialField:
    chart: Chart
    point_indices: np.ndarray
    vectors: np.ndarray        # shape (len(point_indices), dim)
    scale: float
    failed: list = field(default_factory=list)   # (index, reason) pairs

    def at(self, x) -> np.ndarray:
        i = self.chart.space.index_of(x)
        pos = np.where(self.point_indices == i)[0]
        if pos.size == 0:
            raise KeyError(f"no differential stored at point {x}")
        return self.vectors[pos[0]]


def estimate_differential_field(f: ScalarField, chart: Chart, scale: float,
                                points=None, tol: float = 1e-8) -> DifferentialField:
    pts = chart.indices if points is None else np.asarray(points, dtype=int)
    vecs = np.full((len(pts), chart.dim), np.nan)
    failed = []
    for k, i in enumerate(pts):
        try:
            vecs[k] = estimate_differential(f, chart, int(i), scale, tol=tol)
        except (ValueError, DegenerateCoordinatesError) as exc:
            failed.append((int(i), str(exc)))
    return DifferentialField(chart=chart, point_indices=pts, vectors=vecs,
                             scale=scale, failed=failed)


@dataclass
class ResidualProfile:
    point: str
    scales: np.ndarray
    residuals: np.ndarray
    threshold: float
    decreasing: bool
    verdict: bool


def residual_profile(f: ScalarField, chart: Chart, df_at_x, x, scales,
                     threshold_fraction: float = 0.05,
                     lip_f: float | None = None) -> ResidualProfile:
    """Per-scale first-order residuals and a finite differentiability verdict.

    The verdict asks the finest-scale residual to fall below
    threshold_fraction * L(f) and the residuals to be nonincreasing over the
    last three scales.  Pass lip_f to reuse a precomputed global constant
    (the full pair sweep is quadratic).
    """
    space = f.space
    i = space.index_of(x)
    scales = np.asarray([float(r) for r in np.atleast_1d(scales)])
    if np.any(scales <= 0) or not np.all(np.diff(scales) < 0):
        raise ValueError("scales must be positive and strictly descending")
    xi = chart.coord_matrix()
    v = np.asarray(df_at_x, dtype=float)
    res = np.empty(scales.size)
    order, sd = space.sorted_row(i)
    for k, r in enumerate(scales):
        sel = order[:ball_cut(sd, r)]
        err = f.values[sel] - f.values[i] - (xi[sel] - xi[i]) @ v
        res[k] = float(np.abs(err).max()) / r
    threshold = threshold_fraction * (global_lip(f) if lip_f is None else lip_f)
    tail = res[-3:] if res.size >= 3 else res
    decreasing = bool(np.all(np.diff(tail) <= 1e-12 * max(1.0, float(res.max()))))
    verdict = bool(res[-1] <= threshold and decreasing)
    return ResidualProfile(point=space.point_ids[i], scales=scales, residuals=res,
                           threshold=threshold, decreasing=decreasing, verdict=verdict)


@dataclass
class LipDerivStats:
    k_hat: np.ndarray            # per-point worst two-sided ratio over the family
    fraction_within: float       # mu-fraction of points with K^ <= budget
    infinite_points: np.ndarray  # points where some slope had no matching |df|
    budget: float


def lipderiv_check(fields, derivations, scales, k_budget: float,
                   points=None) -> LipDerivStats:
    """Two-sided comparability of |df(x)| with the pointwise slope of f.

    For each field the ratio max(|df|/slope, slope/|df|) is taken with the
    0/0 = 1 convention; K^(x) is the worst ratio over the family.  The
    verdict fraction weighs points by measure.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("field family must be nonempty")
    derivations = list(derivations)
    space = fields[0].space
    pts = np.arange(space.n) if points is None else np.asarray(points, dtype=int)

    k_hat = np.ones(len(pts))
    for f in fields:
        df = np.stack([d.apply(f) for d in derivations], axis=1)
        df_norm = np.linalg.norm(df, axis=1)
        for a, i in enumerate(pts):
            slope = pointwise_lip_profile(f, int(i), scales, warn=False).lip_upper
            nd = df_norm[i]
            if slope == 0.0 and nd == 0.0:
                ratio = 1.0
            elif slope == 0.0 or nd == 0.0:
                ratio = math.inf
            else:
                ratio = max(nd / slope, slope / nd)
            if ratio > k_hat[a]:
                k_hat[a] = ratio
    w = space.weights[pts]
    fraction = float(w[k_hat <= k_budget].sum() / w.sum())
    return LipDerivStats(k_hat=k_hat, fraction_within=fraction,
                         infinite_points=pts[~np.isfinite(k_hat)],
                         budget=float(k_budget))


def sphere_directions(dim: int, count: int) -> np.ndarray:
    """Deterministic seedless direction samples on the unit sphere.

    dim 1: the two signs; dim 2: uniform angles; dim 3: Fibonacci spiral;
    higher dims: golden-ratio lattice pushed through spherical coordinates
    (coverage-oriented rather than exactly uniform).
    """
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        t = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    if dim == 3:
        k = np.arange(count) + 0.5
        phi = math.pi * (1 + math.sqrt(5.0)) * k
        z = 1 - 2 * k / count
        r = np.sqrt(np.maximum(0.0, 1 - z * z))
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    # generalised golden-ratio lattice in the angle cube
    degree = dim - 1
    phi_d = 2.0
    for _ in range(40):
        phi_d = (1 + phi_d) ** (1.0 / (degree + 1))
    alpha = phi_d ** -(1 + np.arange(degree))
    u = np.mod(np.outer(np.arange(1, count + 1), alpha) + 0.5, 1.0)
    angles = np.empty_like(u)
    angles[:, :-1] = u[:, :-1] * math.pi
    angles[:, -1] = u[:, -1] * 2 * math.pi
    out = np.empty((count, dim))
    sin_prod = np.ones(count)
    for j in range(degree):
        out[:, j] = sin_prod * np.cos(angles[:, j])
        sin_prod = sin_prod * np.sin(angles[:, j])
    out[:, -1] = sin_prod
    return out


@dataclass
class ChartConstant:
    point: str
    value: float                 # min over sampled directions of the slope
    direction: np.ndarray        # achieving direction
    degenerate: bool             # value below 1e-6 * L(xi)


def chart_lower_constant(chart: Chart, x, scales, samples: int | None = None) -> ChartConstant:
    """K(x) = min over unit directions c of the slope of c . xi at x.

    Directions come from the deterministic sphere pattern with at least
    100 * dim samples; a near-zero minimum flags the point as degenerate
    (the coordinates are locally dependent there).
    """
    if chart.dim < 1:
        raise ValueError("chart dimension must be >= 1")
    space = chart.space
    i = space.index_of(x)
    if samples is None:
        samples = 100 * chart.dim
    dirs = sphere_directions(chart.dim, max(samples, 100 * chart.dim))
    xi = chart.coord_matrix()
    scales = np.asarray([float(r) for r in np.atleast_1d(scales)])
    order, sd = space.sorted_row(i)

    best_val, best_dir = math.inf, dirs[0]
    for c in dirs:
        proj = xi @ c
        slope = 0.0
        for r in scales:
            sel = order[:ball_cut(sd, r)]
            slope = max(slope, float(np.abs(proj[sel] - proj[i]).max()) / r)
        if slope < best_val:
            best_val, best_dir = slope, c
    degenerate = best_val < 1e-6 * chart.coord_lip()
    return ChartConstant(point=space.point_ids[i], value=best_val,
                         direction=np.asarray(best_dir), degenerate=degenerate)


def subchart_partition(k_values, point_indices=None) -> dict:
    """Dyadic binning   2^-(k+1) <= K < 2^-k  ->  bin k, constant C = 2^(k+1).

    Returns {k: {"indices": ..., "constant": 2^(k+1)}}; nonpositive or
    non-finite K values land in the 'degenerate' bucket.
    """
    k_values = np.asarray(k_values, dtype=float)
    if point_indices is None:
        point_indices = np.arange(k_values.size)
    point_indices = np.asarray(point_indices, dtype=int)
    bins: dict = {}
    degenerate = []
    for idx, val in zip(point_indices, k_values):
        if not math.isfinite(val) or val <= 0:
            degenerate.append(int(idx))
            continue
        mant, exp = math.frexp(val)     # val = mant * 2^exp, mant in [0.5, 1)
        k = -exp
        bins.setdefault(k, []).append(int(idx))
    out = {
        k: {"indices": np.asarray(v, dtype=int), "constant": 2.0 ** (k + 1)}
        for k, v in bins.items()
    }
    if degenerate:
        out["degenerate"] = {"indices": np.asarray(degenerate, dtype=int),
                             "constant": math.inf}
    return out
