"""Global and pointwise Lipschitz constants, extension and convergence checks.

Pointwise constants are scale-indexed on a finite space: for a descending
scale grid r_1 > ... > r_k the slope at scale r is

    slope(r) = max_{y in B(x,r)} |f(y) - f(x)| / r

and the profile summarises Lip^ = max over scales (the upper constant) and
lip^ = min over scales (the lower constant).  Scales finer than the local
resolution carry no information and are dropped with a warning.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .fields import ScalarField
from .space import FiniteMetricMeasureSpace, ball_cut

__all__ = [
    "global_lip",
    "restriction_lip",
    "LipProfile",
    "pointwise_lip_profile",
    "liplip_ratio",
    "mcshane_extend",
    "WeakstarVerdict",
    "weakstar_check",
    "Polynomial",
    "poly_chain_rule_check",
    "default_scale_grid",
]

_CHUNK = 256


def global_lip(f: ScalarField, chunk: int = _CHUNK) -> float:
    """Exact maximum slope |f(y)-f(x)| / d(x,y) over all pairs.

    Swept in row chunks so oracle-backed spaces never materialise the full
    distance matrix.  Returns 0 for single-point spaces.
    """
    space, v = f.space, f.values
    n = space.n
    if n < 2:
        return 0.0
    best = 0.0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        rows = np.vstack([space.dist_row(i) for i in range(lo, hi)])
        dv = np.abs(v[None, :] - v[lo:hi, None])
        with np.errstate(divide="ignore", invalid="ignore"):
            slopes = np.where(rows > 0, dv / rows, 0.0)
        best = max(best, float(slopes.max()))
    return best


def restriction_lip(space: FiniteMetricMeasureSpace, subset, values_on_subset) -> float:
    """Lipschitz constant of a partial function given on `subset` indices."""
    idx = np.asarray(subset, dtype=int)
    vals = np.asarray(values_on_subset, dtype=float)
    if idx.size != vals.size:
        raise ValueError("subset and values must align")
    if idx.size < 2:
        return 0.0
    best = 0.0
    for a, i in enumerate(idx):
        d = space.dist_row(int(i))[idx]
        dv = np.abs(vals - vals[a])
        mask = d > 0
        if mask.any():
            best = max(best, float((dv[mask] / d[mask]).max()))
    return best


def default_scale_grid(r0: float, count: int = 6) -> np.ndarray:
    """Geometric grid r0, r0/2, ..., descending."""
    return r0 * 0.5 ** np.arange(count)


@dataclass
class LipProfile:
    point: str
    scales: np.ndarray        # scales actually used, descending
    slopes: np.ndarray        # max_{ball} |df| / r per scale
    dropped: list[float]      # sub-resolution scales that were discarded

    @property
    def lip_upper(self) -> float:
        return float(self.slopes.max())

    @property
    def lip_lower(self) -> float:
        return float(self.slopes.min())


def _profile_slopes(space, values, i, scales):
    out = np.empty(len(scales))
    order, sd = space.sorted_row(i)
    for k, r in enumerate(scales):
        m = ball_cut(sd, r)
        out[k] = float(np.abs(values[order[:m]] - values[i]).max()) / r
    return out


def pointwise_lip_profile(f: ScalarField, x, scales, warn: bool = True) -> LipProfile:
    """Per-scale maximal slopes of f over closed balls around x.

    Scales must be positive and descending; scales below the nearest-neighbour
    distance of x are dropped (the ball degenerates to {x}).
    """
    space = f.space
    i = space.index_of(x)
    scales = [float(r) for r in np.atleast_1d(scales)]
    if not scales or any(r <= 0 for r in scales):
        raise ValueError("scales must be positive")
    if sorted(scales, reverse=True) != scales:
        raise ValueError("scales must be descending")
    resolution = space.nearest_neighbor_distance(i)
    used = [r for r in scales if r >= resolution or not math.isfinite(resolution)]
    dropped = [r for r in scales if r not in used]
    if dropped and warn:
        warnings.warn(
            f"dropped {len(dropped)} scales below resolution {resolution:.3g} at {space.point_ids[i]}",
            stacklevel=2,
        )
    if not used:
        raise ValueError("every scale lies below the local resolution")
    slopes = _profile_slopes(space, f.values, i, used)
    return LipProfile(point=space.point_ids[i], scales=np.asarray(used),
                      slopes=slopes, dropped=dropped)


def liplip_ratio(f: ScalarField, x, scales, warn: bool = True) -> float:
    """Lip^ / lip^ across the scale grid; 0/0 reads as 1, positive/0 as inf."""
    prof = pointwise_lip_profile(f, x, scales, warn=warn)
    hi, lo = prof.lip_upper, prof.lip_lower
    if hi == 0.0:
        return 1.0
    if lo == 0.0:
        return math.inf
    return hi / lo


def mcshane_extend(space: FiniteMetricMeasureSpace, subset, values_on_subset,
                   name: str = "") -> ScalarField:
    """Minimal-slope extension  x -> min_a ( f(a) + L * d(x,a) )  over a in A.

    The constant L is the exact Lipschitz constant of the partial data; the
    result restricts to the data exactly and has global constant <= L.
    """
    idx = np.asarray(subset, dtype=int)
    if idx.size == 0:
        raise ValueError("subset must be nonempty")
    if len(np.unique(idx)) != idx.size:
        raise ValueError("subset indices must be distinct")
    vals = np.asarray(values_on_subset, dtype=float)
    L = restriction_lip(space, idx, vals)
    out = np.full(space.n, np.inf)
    for a, i in enumerate(idx):
        cand = vals[a] + L * space.dist_row(int(i))
        np.minimum(out, cand, out=out)
    out[idx] = vals  # exact on the data (the min attains it up to rounding)
    return ScalarField(space, out, name=name or "mcshane")


@dataclass
class WeakstarVerdict:
    accepted: bool
    sup_lip: float
    tail_deviation: float
    l_budget: float
    tol: float


def weakstar_check(sequence, limit: ScalarField, l_budget: float,
                   tol: float = 1e-8, tail: int = 1) -> WeakstarVerdict:
    """Sequential convergence test: bounded constants + pointwise convergence.

    Accepts iff the max pointwise deviation over the last `tail` fields is
    <= tol and sup_m L(f_m) <= l_budget.
    """
    seq = list(sequence)
    if not seq:
        raise ValueError("need at least one field")
    for g in seq:
        if not g.same_space(limit):
            raise ValueError("all fields must live on the same space")
    sup_l = max(global_lip(g) for g in seq)
    tail = max(1, min(tail, len(seq)))
    dev = max(float(np.abs(g.values - limit.values).max()) for g in seq[-tail:])
    return WeakstarVerdict(
        accepted=(dev <= tol and sup_l <= l_budget),
        sup_lip=sup_l,
        tail_deviation=dev,
        l_budget=float(l_budget),
        tol=float(tol),
    )


class Polynomial:
    """Real polynomial in n variables as a list of (coeff, exponent tuple)."""

    def __init__(self, terms):
        self.terms = [(float(c), tuple(int(e) for e in exps)) for c, exps in terms]
        if not self.terms:
            raise ValueError("polynomial needs at least one term")
        arity = {len(e) for _, e in self.terms}
        if len(arity) != 1:
            raise ValueError("all exponent tuples must have the same arity")
        self.arity = arity.pop()

    @staticmethod
    def from_json_obj(obj) -> "Polynomial":
        return Polynomial([(t["coeff"], t["exponents"]) for t in obj])

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(pts.shape[0])
        for c, exps in self.terms:
            term = np.full(pts.shape[0], c)
            for k, e in enumerate(exps):
                if e:
                    term *= pts[:, k] ** e
            out += term
        return out

    def slope_bound_constant(self, at_values) -> float:
        """Telescoping bound constant C(p, v): each term contributes
        |c| * sum_i m_i |v_i|^(m_i - 1) * prod_{j != i} |v_j|^m_j."""
        v = np.abs(np.atleast_1d(np.asarray(at_values, dtype=float)))
        total = 0.0
        for c, exps in self.terms:
            for i, m in enumerate(exps):
                if m == 0:
                    continue
                part = m * (v[i] ** (m - 1) if m > 1 else 1.0)
                for j, mj in enumerate(exps):
                    if j != i and mj:
                        part *= v[j] ** mj
                total += abs(c) * part
        return total


@dataclass
class ChainRuleCheck:
    residual: float        # Lip^ of the composite at x
    bound: float           # C(p, f(x)) * max_i Lip^[f_i](x)
    violated: bool         # residual exceeds bound by more than 10%
    component_lips: np.ndarray


def poly_chain_rule_check(fields, x, poly: Polynomial, scales) -> ChainRuleCheck:
    """Slope of a polynomial composite vs the telescoping chain-rule bound."""
    fields = list(fields)
    if len(fields) != poly.arity:
        raise ValueError("polynomial arity must match the number of fields")
    space = fields[0].space
    i = space.index_of(x)
    stacked = np.stack([g.values for g in fields], axis=1)
    composite = ScalarField(space, poly(stacked), name="composite")
    comp_prof = pointwise_lip_profile(composite, i, scales, warn=False)
    comp_lips = np.array([
        pointwise_lip_profile(g, i, scales, warn=False).lip_upper for g in fields
    ])
    bound = poly.slope_bound_constant(stacked[i]) * float(comp_lips.max())
    residual = comp_prof.lip_upper
    return ChainRuleCheck(
        residual=residual,
        bound=bound,
        violated=residual > 1.1 * bound + 1e-15,
        component_lips=comp_lips,
    )
