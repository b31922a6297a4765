"""Finite metric measure spaces.

A space is a finite point set with a symmetric distance, strictly positive
per-point weights (the measure), and optionally ambient coordinates when the
points were sampled from R^n.  This module provides:

  * FiniteMetricMeasureSpace  - storage, ball queries, metric audits
  * SpaceSpec / generate_space - grid, path, IFS fractal, snowflake and
    random-sample generators
  * doubling_stats            - per-radius doubling ratios and the dyadic
    doubling exponent
  * lebesgue_density_profile  - ball averages of a field vs its centre value

Distances are held as a dense matrix up to DENSE_LIMIT points; above that an
on-demand row oracle (backed by ambient coordinates and a small row cache) is
used, with a KD-tree accelerating ball queries.
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "DENSE_LIMIT",
    "BALL_TIE_RTOL",
    "ball_cut",
    "MetricAxiomError",
    "FiniteMetricMeasureSpace",
    "SpaceSpec",
    "generate_space",
    "ball",
    "doubling_stats",
    "DoublingStats",
    "lebesgue_density_profile",
    "audit_metric",
]

# Dense pairwise storage is the O(n^2) memory wall; beyond it we fall back to
# an ambient-coordinate oracle.
DENSE_LIMIT = 4000

_ROW_CACHE_SIZE = 512

# Closed balls include radius ties; this relative slack keeps points whose
# stored distance differs from the true tie value by float rounding.
BALL_TIE_RTOL = 1e-12


def ball_cut(sorted_distances: np.ndarray, r: float) -> int:
    """Count of entries within the closed ball of radius r (tie tolerant)."""
    return int(np.searchsorted(sorted_distances, r * (1.0 + BALL_TIE_RTOL), side="right"))


class MetricAxiomError(ValueError):
    """A distance table violates a metric axiom."""


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


class FiniteMetricMeasureSpace:
    """Finite point set with symmetric distances and positive weights.

    Immutable after construction; all query methods are safe for concurrent
    readers.  Either a dense distance matrix or ambient coordinates must be
    supplied.  ``snowflake_exponent`` s is applied on top of the ambient
    Euclidean distance (d = |x - y|^s); dense matrices are stored already
    transformed.
    """

    def __init__(
        self,
        point_ids,
        weights,
        dist_matrix=None,
        ambient_coords=None,
        snowflake_exponent: float = 1.0,
        meta: dict | None = None,
        validate: bool = True,
    ):
        self.point_ids = [str(p) for p in point_ids]
        n = len(self.point_ids)
        if n < 1:
            raise ValueError("a space needs at least one point")
        if len(set(self.point_ids)) != n:
            raise ValueError("point ids must be unique")
        self.weights = _as_float_array(weights, "weights")
        if self.weights.shape != (n,):
            raise ValueError("weights must have one entry per point")
        if np.any(self.weights <= 0):
            raise ValueError("all weights must be > 0")
        if not 0 < snowflake_exponent <= 1:
            raise ValueError("snowflake exponent must lie in (0, 1]")
        self.snowflake_exponent = float(snowflake_exponent)
        self.meta = dict(meta or {})

        self.ambient_coords = None
        if ambient_coords is not None:
            coords = _as_float_array(ambient_coords, "ambient coordinates")
            if coords.ndim == 1:
                coords = coords[:, None]
            if coords.shape[0] != n:
                raise ValueError("one coordinate row per point required")
            self.ambient_coords = coords

        self._dist = None
        if dist_matrix is not None:
            d = _as_float_array(dist_matrix, "distance matrix")
            if d.shape != (n, n):
                raise ValueError("distance matrix must be square over the points")
            self._dist = d
        elif n <= DENSE_LIMIT:
            self._dist = self._dense_from_coords()
        elif self.ambient_coords is None:
            raise ValueError(
                f"spaces above {DENSE_LIMIT} points need ambient coordinates "
                "(dense storage refused)"
            )

        self._index = {pid: i for i, pid in enumerate(self.point_ids)}
        self._tree = None
        self._row_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._min_pairwise = None
        self._diameter = None

        if validate:
            self._validate_axioms()

    # -- construction helpers -------------------------------------------------

    def _dense_from_coords(self) -> np.ndarray:
        if self.ambient_coords is None:
            raise ValueError("need a distance matrix or ambient coordinates")
        c = self.ambient_coords
        diff = c[:, None, :] - c[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        np.fill_diagonal(d, 0.0)
        d = np.minimum(d, d.T)
        if self.snowflake_exponent != 1.0:
            d = d ** self.snowflake_exponent
        return d

    def _validate_axioms(self) -> None:
        if self._dist is None:
            return  # oracle distances are Euclidean powers, axioms hold
        d = self._dist
        if np.any(np.diag(d) != 0.0):
            raise MetricAxiomError("d(x,x) must be 0")
        if not np.allclose(d, d.T, rtol=0, atol=0):
            raise MetricAxiomError("distance matrix must be symmetric")
        off = d[~np.eye(self.n, dtype=bool)]
        if off.size and np.any(off <= 0):
            raise MetricAxiomError("distinct points must have positive distance")
        report = audit_metric(self, exhaustive=self.n <= 600)
        if not report["passed"]:
            raise MetricAxiomError(
                f"triangle inequality violated, worst slack {report['worst_slack']:.3e}"
            )

    # -- basic queries --------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.point_ids)

    def index_of(self, point) -> int:
        """Resolve a point id or integer index; unknown ids raise KeyError."""
        if isinstance(point, (int, np.integer)):
            i = int(point)
            if not 0 <= i < self.n:
                raise KeyError(f"point index {i} out of range")
            return i
        try:
            return self._index[str(point)]
        except KeyError:
            raise KeyError(f"unknown point id {point!r}") from None

    def ids_of(self, indices) -> list[str]:
        return [self.point_ids[int(i)] for i in np.atleast_1d(indices)]

    def dist_row(self, i: int) -> np.ndarray:
        if self._dist is not None:
            return self._dist[i]
        c = self.ambient_coords
        row = np.sqrt(np.sum((c - c[i]) ** 2, axis=1))
        if self.snowflake_exponent != 1.0:
            row = row ** self.snowflake_exponent
        return row

    def dist(self, i, j) -> float:
        i, j = self.index_of(i), self.index_of(j)
        return float(self.dist_row(i)[j])

    def dist_matrix(self) -> np.ndarray:
        """Full matrix; assembled on demand for oracle spaces (may be large)."""
        if self._dist is not None:
            return self._dist
        return np.vstack([self.dist_row(i) for i in range(self.n)])

    def sorted_row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(neighbour order, nondecreasing distances) for point i, cached."""
        hit = self._row_cache.get(i)
        if hit is not None:
            return hit
        row = self.dist_row(i)
        order = np.argsort(row, kind="stable")
        entry = (order, row[order])
        if len(self._row_cache) >= _ROW_CACHE_SIZE:
            self._row_cache.pop(next(iter(self._row_cache)))
        self._row_cache[i] = entry
        return entry

    def kdtree(self) -> cKDTree:
        if self.ambient_coords is None:
            raise ValueError("no ambient coordinates for KD-tree queries")
        if self._tree is None:
            self._tree = cKDTree(self.ambient_coords)
        return self._tree

    def ball_indices(self, i: int, r: float) -> np.ndarray:
        """Closed ball B(x_i, r) as indices, always containing i."""
        if r < 0:
            raise ValueError("radius must be >= 0")
        if self._dist is not None or self.n <= DENSE_LIMIT:
            order, sd = self.sorted_row(i)
            return np.sort(order[:ball_cut(sd, r)])
        # ambient oracle: metric radius r corresponds to Euclidean r^(1/s)
        amb = r ** (1.0 / self.snowflake_exponent)
        idx = self.kdtree().query_ball_point(self.ambient_coords[i], amb * (1 + 1e-9))
        idx = np.asarray(sorted(idx), dtype=int)
        keep = self.dist_row(i)[idx] <= r * (1.0 + BALL_TIE_RTOL)
        return idx[keep]

    def ball_weight(self, i: int, r: float) -> float:
        return float(np.sum(self.weights[self.ball_indices(i, r)]))

    def nearest_neighbor_distance(self, i: int) -> float:
        if self.n == 1:
            return math.inf
        row = self.dist_row(i)
        return float(np.min(row[np.arange(self.n) != i]))

    def min_pairwise_distance(self) -> float:
        if self._min_pairwise is None:
            if self.n == 1:
                self._min_pairwise = math.inf
            elif self._dist is not None:
                d = self._dist + np.diag(np.full(self.n, np.inf))
                self._min_pairwise = float(d.min())
            else:
                dd, _ = self.kdtree().query(self.ambient_coords, k=2)
                self._min_pairwise = float(dd[:, 1].min() ** self.snowflake_exponent)
        return self._min_pairwise

    def diameter(self) -> float:
        if self._diameter is None:
            if self._dist is not None:
                self._diameter = float(self._dist.max())
            else:
                best = 0.0
                for i in range(self.n):
                    best = max(best, float(self.dist_row(i).max()))
                self._diameter = best
        return self._diameter

    def total_measure(self) -> float:
        return float(self.weights.sum())

    def with_weights(self, weights) -> "FiniteMetricMeasureSpace":
        """Same geometry under a different measure."""
        return FiniteMetricMeasureSpace(
            self.point_ids,
            weights,
            dist_matrix=self._dist,
            ambient_coords=self.ambient_coords,
            snowflake_exponent=self.snowflake_exponent,
            meta=self.meta,
            validate=False,
        )

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        kind = self.meta.get("kind", "space")
        return f"<FiniteMetricMeasureSpace {kind} n={self.n}>"


# -- metric audit -------------------------------------------------------------

def audit_metric(space, exhaustive: bool | None = None, samples: int = 1_000_000,
                 seed: int = 0, rel_tol: float = 1e-9) -> dict:
    """Check the triangle inequality, exhaustively for small spaces.

    Exhaustive mode sweeps every midpoint k (O(n^3) comparisons, vectorised);
    otherwise `samples` random triples are tested.  Slack is measured relative
    to the triple's scale.
    """
    n = space.n
    if exhaustive is None:
        exhaustive = n <= 2000
    worst = 0.0
    if n < 3:
        return {"passed": True, "worst_slack": 0.0, "exhaustive": True}
    if exhaustive and (space._dist is not None or n <= DENSE_LIMIT):
        d = space.dist_matrix()
        for k in range(n):
            via = d[:, k][:, None] + d[k, :][None, :]
            slack = (d - via) / np.maximum(1e-300, np.maximum(d, via))
            worst = max(worst, float(slack.max()))
            if worst > rel_tol:
                break
    else:
        rng = np.random.default_rng(seed)
        m = min(samples, 4 * n * n * n)
        ii = rng.integers(0, n, size=m)
        jj = rng.integers(0, n, size=m)
        kk = rng.integers(0, n, size=m)
        if space._dist is not None:
            d_ij = space._dist[ii, jj]
            d_ik = space._dist[ii, kk]
            d_kj = space._dist[kk, jj]
        else:
            c = space.ambient_coords
            s = space.snowflake_exponent
            d_ij = np.linalg.norm(c[ii] - c[jj], axis=1) ** s
            d_ik = np.linalg.norm(c[ii] - c[kk], axis=1) ** s
            d_kj = np.linalg.norm(c[kk] - c[jj], axis=1) ** s
        via = d_ik + d_kj
        slack = (d_ij - via) / np.maximum(1e-300, np.maximum(d_ij, via))
        worst = float(slack.max())
    return {"passed": worst <= rel_tol, "worst_slack": worst, "exhaustive": exhaustive}


# -- public ball operation ----------------------------------------------------

def ball(space: FiniteMetricMeasureSpace, x, r: float) -> np.ndarray:
    """Closed-ball point indices {y : d(x,y) <= r}; always contains x."""
    i = space.index_of(x)
    return space.ball_indices(i, r)


# -- doubling statistics ------------------------------------------------------

@dataclass
class DoublingStats:
    radii: np.ndarray            # radii actually used (sub-resolution dropped)
    kappa: np.ndarray            # per-radius max_x mu(B(x,2r)) / mu(B(x,r))
    argmax_points: list[str]     # a witness centre per radius
    doubling_exponent: float     # log2(max kappa)
    dropped_radii: list[float]

    @property
    def kappa_max(self) -> float:
        return float(self.kappa.max())


def doubling_stats(space: FiniteMetricMeasureSpace, radii) -> DoublingStats:
    """Per-radius doubling ratios kappa(r) and the exponent log2(max kappa).

    Radii below the minimum pairwise distance are excluded (balls degenerate
    to singletons there); an empty radius list is an error.
    """
    radii = [float(r) for r in np.atleast_1d(radii)]
    if not radii:
        raise ValueError("radius list must be nonempty")
    if any(r <= 0 for r in radii):
        raise ValueError("radii must be positive")
    if sorted(radii) != radii:
        raise ValueError("radii must be sorted ascending")
    min_d = space.min_pairwise_distance()
    usable = [r for r in radii if not r < min_d] if math.isfinite(min_d) else radii
    dropped = [r for r in radii if r not in usable]
    if dropped:
        warnings.warn(
            f"dropping {len(dropped)} radii below the resolution {min_d:.3g}",
            stacklevel=2,
        )
    if not usable:
        raise ValueError("all radii lie below the minimum pairwise distance")

    kappas = np.empty(len(usable))
    witnesses = []
    for k, r in enumerate(usable):
        best, arg = 0.0, 0
        for i in range(space.n):
            ratio = space.ball_weight(i, 2 * r) / space.ball_weight(i, r)
            if ratio > best:
                best, arg = ratio, i
        kappas[k] = best
        witnesses.append(space.point_ids[arg])
    return DoublingStats(
        radii=np.asarray(usable),
        kappa=kappas,
        argmax_points=witnesses,
        doubling_exponent=float(np.log2(kappas.max())),
        dropped_radii=dropped,
    )


# -- Lebesgue density profile ---------------------------------------------------

def lebesgue_density_profile(space: FiniteMetricMeasureSpace, values, radii) -> dict:
    """Ball averages A_r f(x) and their deviation |A_r f(x) - f(x)|.

    Returns a dict with 'radii', 'averages' (n_points x n_radii) and
    'deviations' of the same shape.
    """
    vals = _as_float_array(values, "field values")
    if vals.shape != (space.n,):
        raise ValueError("field must supply one value per point")
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    averages = np.empty((space.n, radii.size))
    for i in range(space.n):
        for k, r in enumerate(radii):
            idx = space.ball_indices(i, r)
            w = space.weights[idx]
            averages[i, k] = float(np.dot(w, vals[idx]) / w.sum())
    deviations = np.abs(averages - vals[:, None])
    return {"radii": radii, "averages": averages, "deviations": deviations}


# -- space specifications -------------------------------------------------------

@dataclass
class SpaceSpec:
    """Declarative description of a generated space (JSON round-trippable)."""

    kind: str
    params: dict = field(default_factory=dict)

    KINDS = (
        "euclidean_grid",
        "path_graph",
        "snowflake",
        "cantor_ifs",
        "sierpinski_carpet",
        "random_points",
        "imported",
    )

    def validate(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown space kind {self.kind!r}")
        p = self.params
        if self.kind == "snowflake":
            s = p.get("s")
            if not (isinstance(s, (int, float)) and 0 < s < 1):
                raise ValueError("snowflake exponent s must lie in (0,1)")
            SpaceSpec.from_dict(p["base"]).validate()
        if self.kind == "cantor_ifs":
            ratios = p.get("ratios", [])
            if not ratios or any(not 0 < r < 1 for r in ratios):
                raise ValueError("IFS contraction ratios must lie in (0,1)")
            if int(p.get("depth", -1)) < 0:
                raise ValueError("depth must be >= 0")
        if self.kind == "sierpinski_carpet" and int(p.get("depth", -1)) < 0:
            raise ValueError("depth must be >= 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @staticmethod
    def from_dict(d: dict) -> "SpaceSpec":
        d = dict(d)
        kind = d.pop("kind")
        return SpaceSpec(kind=kind, params=d)

    @staticmethod
    def from_json(text: str) -> "SpaceSpec":
        return SpaceSpec.from_dict(json.loads(text))


def _grid_points(step: float, extent, dim: int) -> np.ndarray:
    lo, hi = float(extent[0]), float(extent[1])
    count = int(round((hi - lo) / step)) + 1
    axis = lo + step * np.arange(count)
    if dim == 1:
        return axis[:, None]
    axes = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=1)


def _ifs_points(ratios, offsets, rotations, depth, base_point, masses):
    """Expand all depth-length address words of the iterated function system."""
    nmaps = len(ratios)
    dim = len(base_point)
    pts, wts, ids = [], [], []
    for word in itertools.product(range(nmaps), repeat=depth):
        x = np.array(base_point, dtype=float)
        for j in reversed(word):
            x = ratios[j] * (rotations[j] @ x) + offsets[j]
        pts.append(x)
        wts.append(float(np.prod([masses[j] for j in word])) if depth else 1.0)
        ids.append("w" + "".join(str(j) for j in word) if depth else "w")
    return np.asarray(pts).reshape(len(pts), dim), np.asarray(wts), ids


def _branch_overlap_warning(coords, ids, depth) -> bool:
    """Conservative piece-disjointness check via first-letter bounding boxes."""
    if depth < 1 or len(ids) < 2:
        return False
    first = np.array([int(w[1]) for w in ids])
    boxes = {}
    for j in np.unique(first):
        sub = coords[first == j]
        boxes[j] = (sub.min(axis=0), sub.max(axis=0))
    scale = float(np.ptp(coords)) or 1.0
    tol = 1e-12 * scale
    for a, b in itertools.combinations(sorted(boxes), 2):
        lo = np.maximum(boxes[a][0], boxes[b][0])
        hi = np.minimum(boxes[a][1], boxes[b][1])
        if np.all(lo <= hi + tol):
            return True
    return False


def generate_space(spec: SpaceSpec) -> FiniteMetricMeasureSpace:
    """Build the space described by `spec`; deterministic for a fixed spec."""
    spec.validate()
    p = spec.params
    kind = spec.kind

    if kind == "euclidean_grid":
        dim = int(p.get("dim", 1))
        coords = _grid_points(float(p["step"]), p.get("extent", (0.0, 1.0)), dim)
        n = len(coords)
        return FiniteMetricMeasureSpace(
            [f"p{i}" for i in range(n)], np.full(n, 1.0 / n), ambient_coords=coords,
            meta={"kind": kind, "spec": spec.to_dict()},
        )

    if kind == "path_graph":
        n = int(p["n"])
        step = float(p.get("step", 1.0))
        coords = (step * np.arange(n))[:, None]
        return FiniteMetricMeasureSpace(
            [f"p{i}" for i in range(n)], np.full(n, 1.0 / n), ambient_coords=coords,
            meta={"kind": kind, "spec": spec.to_dict()},
        )

    if kind == "random_points":
        n, dim = int(p["n"]), int(p.get("dim", 2))
        rng = np.random.default_rng(int(p.get("seed", 0)))
        coords = rng.random((n, dim))
        return FiniteMetricMeasureSpace(
            [f"p{i}" for i in range(n)], np.full(n, 1.0 / n), ambient_coords=coords,
            meta={"kind": kind, "spec": spec.to_dict()},
        )

    if kind == "snowflake":
        base = generate_space(SpaceSpec.from_dict(p["base"]))
        s = float(p["s"])
        meta = {"kind": kind, "spec": spec.to_dict(), "base_kind": base.meta.get("kind")}
        if base._dist is not None and base.snowflake_exponent == 1.0 and base.ambient_coords is not None:
            return FiniteMetricMeasureSpace(
                base.point_ids, base.weights, ambient_coords=base.ambient_coords,
                snowflake_exponent=s, meta=meta, validate=False,
            )
        if base._dist is not None:
            return FiniteMetricMeasureSpace(
                base.point_ids, base.weights, dist_matrix=base._dist ** s,
                ambient_coords=base.ambient_coords, meta=meta, validate=False,
            )
        return FiniteMetricMeasureSpace(
            base.point_ids, base.weights, ambient_coords=base.ambient_coords,
            snowflake_exponent=s * base.snowflake_exponent, meta=meta, validate=False,
        )

    if kind in ("cantor_ifs", "sierpinski_carpet"):
        if kind == "sierpinski_carpet":
            depth = int(p["depth"])
            cells = [(a, b) for a in range(3) for b in range(3) if (a, b) != (1, 1)]
            ratios = [1.0 / 3.0] * 8
            offsets = [np.array([a / 3.0, b / 3.0]) for a, b in cells]
            rotations = [np.eye(2)] * 8
            masses = [1.0 / 8.0] * 8
            dim = 2
        else:
            ratios = [float(r) for r in p["ratios"]]
            raw_offsets = [np.atleast_1d(np.asarray(v, dtype=float)) for v in p["offsets"]]
            dim = len(raw_offsets[0])
            offsets = raw_offsets
            rotations = [np.asarray(R, dtype=float) for R in p.get("rotations", [])] or [
                np.eye(dim) for _ in ratios
            ]
            masses = [float(m) for m in p.get("masses", [])] or [1.0 / len(ratios)] * len(ratios)
            depth = int(p["depth"])
            if not math.isclose(sum(masses), 1.0, rel_tol=1e-12):
                raise ValueError("branch masses must sum to 1")
        # base point: fixed point of the first similitude
        A = np.eye(dim) - ratios[0] * rotations[0]
        base_point = np.linalg.solve(A, offsets[0])
        coords, wts, ids = _ifs_points(ratios, offsets, rotations, depth, base_point, masses)
        overlap = _branch_overlap_warning(coords, ids, depth)
        if overlap:
            warnings.warn("IFS pieces appear to touch or overlap at this depth", stacklevel=2)
        return FiniteMetricMeasureSpace(
            ids, wts, ambient_coords=coords,
            meta={"kind": kind, "spec": spec.to_dict(), "overlap_warning": overlap},
        )

    if kind == "imported":
        raise ValueError("imported spaces are built via lipcalc.io.read_space_csv")

    raise AssertionError(f"unreachable kind {kind}")
