"""Discrete derivation operators and their linear algebra.

A stencil derivation acts on fields by  (δf)(x) = sum_y w_xy (f(y) - f(x))
over a small neighbour list inside B(x, h).  Constants are annihilated
exactly and |δf(x)| <= L(f) * sum_y |w_xy| d(x,y) by construction; the
product-rule defect is a measured quantity with an O(h) law on rectifiable
samples, not an enforced identity.

On top of the operators this module provides Jacobi matrix fields
[δ_i g_j(x)] (rows index derivations, columns index generators), pointwise
and essential rank, adjugate-based orthogonalisation, the linear change of
coordinates that normalises an orthogonal leading minor, pushforwards under
point maps, per-point chain-rule coefficient recovery, and the rank-vs-scale
sweep used by the experiments.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .fields import ScalarField
from .space import FiniteMetricMeasureSpace

__all__ = [
    "StencilDerivation",
    "build_stencil",
    "axis_direction_set",
    "leibniz_defect",
    "JacobiField",
    "jacobi_matrix",
    "RankResult",
    "pointwise_rank",
    "adjugate",
    "OrthogonalBasisResult",
    "orthogonalize",
    "ChangeOfVariablesResult",
    "change_of_variables",
    "PushforwardResult",
    "pushforward",
    "chain_rule_field",
    "rank_bound_experiment",
]


# ---------------------------------------------------------------------------
# stencil operators
# ---------------------------------------------------------------------------

@dataclass
class StencilDerivation:
    """Sparse first-difference operator with locality radius `support`."""

    space: FiniteMetricMeasureSpace
    src: np.ndarray          # edge source point index
    dst: np.ndarray          # edge neighbour index
    weights: np.ndarray      # signed weights w_xy
    edge_dist: np.ndarray    # metric length of each edge
    support: float           # max edge length (0 for an empty stencil)
    scheme: str = "custom"
    name: str = ""

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=int)
        self.dst = np.asarray(self.dst, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        self.edge_dist = np.asarray(self.edge_dist, dtype=float)
        if np.any(self.src == self.dst):
            raise ValueError("stencil edges must join distinct points")

    def apply(self, values) -> np.ndarray:
        v = values.values if isinstance(values, ScalarField) else np.asarray(values, dtype=float)
        out = np.zeros(self.space.n)
        if self.src.size:
            np.add.at(out, self.src, self.weights * (v[self.dst] - v[self.src]))
        return out

    def normalization(self) -> np.ndarray:
        """Per-point sum |w_xy| d(x,y); bounds |δf(x)| / L(f)."""
        out = np.zeros(self.space.n)
        if self.src.size:
            np.add.at(out, self.src, np.abs(self.weights) * self.edge_dist)
        return out

    def scale_by(self, factor) -> "StencilDerivation":
        """Pointwise module scaling (λ δ)f(x) = λ(x) δf(x)."""
        lam = factor.values if isinstance(factor, ScalarField) else np.asarray(factor, dtype=float)
        return StencilDerivation(
            space=self.space, src=self.src, dst=self.dst,
            weights=self.weights * lam[self.src], edge_dist=self.edge_dist,
            support=self.support, scheme=self.scheme, name=f"scaled({self.name})",
        )

    def mask(self, indicator) -> "StencilDerivation":
        """Restriction by an indicator: zero outside the marked block."""
        ind = np.asarray(indicator, dtype=float)
        return self.scale_by(ind)

    def edges_of(self, i: int) -> list[tuple[int, float]]:
        sel = self.src == i
        return list(zip(self.dst[sel].tolist(), self.weights[sel].tolist()))


def _min_ambient_gap(space) -> float:
    d = space.min_pairwise_distance()
    if not math.isfinite(d):
        return math.inf
    return d ** (1.0 / space.snowflake_exponent)


def _direction_edges(space, h, direction, match_tol):
    """Edges toward the nearest point to x + h*direction (ambient units)."""
    coords = space.ambient_coords
    if coords is None:
        raise ValueError("direction stencils need ambient coordinates")
    direction = np.atleast_1d(np.asarray(direction, dtype=float))
    targets = coords + h * direction
    dist_found, idx = space.kdtree().query(targets)
    tol = match_tol * h * float(np.linalg.norm(direction))
    accept = (dist_found <= tol) & (idx != np.arange(space.n))
    return np.where(accept)[0], idx[accept]


def build_stencil(space: FiniteMetricMeasureSpace, scheme: str, h: float, *,
                  axis: int | None = None, direction=None, net=None,
                  neighbor_rank: int = 0, match_tol: float = 0.25,
                  name: str = "") -> StencilDerivation:
    """Construct a single-neighbour difference operator.

    Schemes:
      nearest_neighbor      edge toward the metrically nearest point in B(x,h)
      coordinate_axis       edge toward x + h e_axis (ambient units), with a
                            signed backward fallback at the far boundary
      direction             edge toward x + h * direction (ambient units)
      net_direction         edge toward the (neighbor_rank+1)-th nearest net
                            point inside B(x,h)

    Weights are 1/d(x,y) (signed for the backward fallback) so the operator
    reproduces unit slope on the target coordinate.  Points with no admissible
    neighbour get an empty stencil and act as zero.
    """
    if h <= 0:
        raise ValueError("stencil scale h must be positive")
    n = space.n

    if scheme == "nearest_neighbor":
        if h < space.min_pairwise_distance():
            raise ValueError("h lies below the nearest-neighbour resolution")
        src, dst = [], []
        for i in range(n):
            order, sd = space.sorted_row(i)
            if len(sd) > 1 and sd[1] <= h:
                src.append(i)
                dst.append(int(order[1]))
        src, dst = np.asarray(src, int), np.asarray(dst, int)
        w_sign = np.ones(src.size)

    elif scheme == "coordinate_axis":
        if axis is None:
            raise ValueError("coordinate_axis needs an axis")
        if h < _min_ambient_gap(space) * (1 - 1e-12):
            raise ValueError("h lies below the nearest-neighbour resolution")
        e = np.zeros(space.ambient_coords.shape[1])
        e[axis] = 1.0
        src_f, dst_f = _direction_edges(space, h, e, match_tol)
        # far boundary: fall back to the backward difference, sign flipped
        missing = np.setdiff1d(np.arange(n), src_f, assume_unique=False)
        src_b, dst_b = _direction_edges(space, h, -e, match_tol)
        keep = np.isin(src_b, missing)
        src = np.concatenate([src_f, src_b[keep]])
        dst = np.concatenate([dst_f, dst_b[keep]])
        w_sign = np.concatenate([np.ones(src_f.size), -np.ones(int(keep.sum()))])

    elif scheme == "direction":
        if direction is None:
            raise ValueError("direction scheme needs a direction vector")
        if h < _min_ambient_gap(space) * (1 - 1e-12):
            raise ValueError("h lies below the nearest-neighbour resolution")
        src, dst = _direction_edges(space, h, direction, match_tol)
        w_sign = np.ones(src.size)

    elif scheme == "net_direction":
        if net is None:
            raise ValueError("net_direction needs a net")
        if h < space.min_pairwise_distance():
            raise ValueError("h lies below the nearest-neighbour resolution")
        net_idx = np.asarray(net.indices, dtype=int)
        src, dst = [], []
        for i in range(n):
            d_to_net = space.dist_row(i)[net_idx]
            order = np.argsort(d_to_net, kind="stable")
            cand = [net_idx[k] for k in order if net_idx[k] != i and d_to_net[k] <= h]
            if len(cand) > neighbor_rank:
                src.append(i)
                dst.append(int(cand[neighbor_rank]))
        src, dst = np.asarray(src, int), np.asarray(dst, int)
        w_sign = np.ones(src.size)

    else:
        raise ValueError(f"unknown stencil scheme {scheme!r}")

    if src.size:
        edge_d = np.array([space.dist(int(a), int(b)) for a, b in zip(src, dst)])
    else:
        edge_d = np.empty(0)
    weights = w_sign / edge_d if src.size else np.empty(0)
    support = float(edge_d.max()) if src.size else 0.0
    return StencilDerivation(space=space, src=src, dst=dst, weights=weights,
                             edge_dist=edge_d, support=support, scheme=scheme,
                             name=name or scheme)


def axis_direction_set(dim: int, budget: int) -> list[np.ndarray]:
    """±axis directions first, then normalised two-axis diagonals."""
    dirs = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        dirs.append(e.copy())
        dirs.append(-e)
    for i, j in itertools.combinations(range(dim), 2):
        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            e = np.zeros(dim)
            e[i], e[j] = si, sj
            dirs.append(e / math.sqrt(2.0))
    if budget > len(dirs):
        raise ValueError(f"direction budget {budget} exceeds the catalogue ({len(dirs)})")
    return dirs[:budget]


def leibniz_defect(delta: StencilDerivation, f: ScalarField, g: ScalarField):
    """Per-point product-rule defect δ(fg) - f δg - g δf and its sup norm."""
    fv, gv = f.values, g.values
    product = fv * gv
    defect = delta.apply(product) - fv * delta.apply(gv) - gv * delta.apply(fv)
    return defect, float(np.abs(defect).max())


# ---------------------------------------------------------------------------
# Jacobi matrix fields
# ---------------------------------------------------------------------------

@dataclass
class JacobiField:
    """Per-point matrix [δ_i g_j(x)]: row i = derivation, column j = generator."""

    space: FiniteMetricMeasureSpace
    tensor: np.ndarray                       # shape (n_points, M, N)
    derivations: list = field(default_factory=list)
    generator_names: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.tensor.shape[1]

    @property
    def n_generators(self) -> int:
        return self.tensor.shape[2]

    def max_support(self) -> float:
        return max((d.support for d in self.derivations), default=0.0)


def jacobi_matrix(derivations, generators) -> JacobiField:
    derivations = list(derivations)
    generators = list(generators)
    if not derivations or not generators:
        raise ValueError("need at least one derivation and one generator")
    space = derivations[0].space
    tensor = np.empty((space.n, len(derivations), len(generators)))
    for i, d in enumerate(derivations):
        for j, g in enumerate(generators):
            tensor[:, i, j] = d.apply(g)
    return JacobiField(space=space, tensor=tensor, derivations=derivations,
                       generator_names=[getattr(g, "name", f"g{j}") for j, g in enumerate(generators)])


def default_rank_tol(jf: JacobiField) -> float:
    h = jf.max_support()
    diam = jf.space.diameter()
    if h > 0 and diam > 0:
        return max(1e-8, 10.0 * h / diam)
    return 1e-8


@dataclass
class RankResult:
    ranks: np.ndarray            # per-point numerical rank
    sigma: np.ndarray            # singular values, shape (n, min(M,N))
    essential_rank: int          # mu-essential max of the rank
    tol: float
    best_subsets: list           # per point: generator index tuple or None

    def sigma_ratio(self, k: int) -> np.ndarray:
        """Per-point σ_{k+1}/σ_1 (0 where unavailable)."""
        out = np.zeros(len(self.sigma))
        have = self.sigma.shape[1] > k
        if have:
            lead = self.sigma[:, 0]
            pos = lead > 0
            out[pos] = self.sigma[pos, k] / lead[pos]
        return out


def pointwise_rank(jf: JacobiField, tol: float | None = None,
                   null_fraction: float = 1e-3,
                   with_subsets: bool = True) -> RankResult:
    """Numerical rank per point plus the measure-essential module rank.

    Rank counts singular values above tol * σ_1.  The essential rank is the
    largest r attained on more than `null_fraction` of the total measure.
    """
    if tol is None:
        tol = default_rank_tol(jf)
    if tol <= 0:
        raise ValueError("rank tolerance must be positive")
    tensor = jf.tensor
    n, m_rows, n_cols = tensor.shape
    sigma = np.linalg.svd(tensor, compute_uv=False)
    lead = sigma[:, 0]
    ranks = np.where(lead > 0,
                     np.sum(sigma > tol * np.maximum(lead, 1e-300)[:, None], axis=1),
                     0).astype(int)

    weights = jf.space.weights
    total = weights.sum()
    essential = 0
    for r in sorted(set(ranks.tolist()), reverse=True):
        if weights[ranks >= r].sum() > null_fraction * total:
            essential = int(r)
            break

    subsets: list = [None] * n
    if with_subsets and m_rows <= n_cols:
        if n_cols <= 12:
            combos = list(itertools.combinations(range(n_cols), m_rows))
            for x in range(n):
                dets = [abs(np.linalg.det(tensor[x][:, list(cb)])) for cb in combos]
                subsets[x] = combos[int(np.argmax(dets))]
        else:
            for x in range(n):
                # greedy rank-revealing column pivoting
                _, _, piv = _qr_column_pivot(tensor[x])
                subsets[x] = tuple(sorted(piv[:m_rows]))
    return RankResult(ranks=ranks, sigma=sigma, essential_rank=essential,
                      tol=float(tol), best_subsets=subsets)


def _qr_column_pivot(A):
    from scipy.linalg import qr
    Q, R, piv = qr(A, pivoting=True)
    return Q, R, piv


def adjugate(A) -> np.ndarray:
    """Classical adjoint via cofactor minors; satisfies adj(A) A = det(A) I."""
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    if A.shape != (m, m):
        raise ValueError("adjugate needs a square matrix")
    if m == 1:
        return np.ones((1, 1))
    cof = np.empty((m, m))
    for i in range(m):
        rows = [r for r in range(m) if r != i]
        for j in range(m):
            cols = [c for c in range(m) if c != j]
            minor = A[np.ix_(rows, cols)]
            cof[i, j] = (-1) ** (i + j) * np.linalg.det(minor)
    return cof.T


@dataclass
class OrthogonalBasisResult:
    """Per-point adjugate coefficients and the induced block partition."""

    jacobi: JacobiField
    subset_per_point: list        # chosen generator columns (tuple) or None
    coefficients: np.ndarray      # (n, M, M); row i gives δ*_i in the old basis
    dets: np.ndarray              # det of the chosen minor per point
    blocks: dict                  # subset tuple -> point index array
    degenerate: np.ndarray        # points with no nonsingular M x M minor

    def orthogonalized_minor(self, x: int) -> np.ndarray:
        """C(x) A(x); equals det(A(x)) I on nondegenerate points."""
        sub = self.subset_per_point[x]
        if sub is None:
            raise ValueError(f"point {x} is in the degenerate block")
        A = self.jacobi.tensor[x][:, list(sub)]
        return self.coefficients[x] @ A


def orthogonalize(jf: JacobiField, tol: float | None = None) -> OrthogonalBasisResult:
    """Adjugate-based rebasing: on each block, C(x) = adj(A(x)) turns the
    chosen M x M generator minor into det(A) I.

    Points where every minor is singular at the rank tolerance land in the
    degenerate block (reported, not fatal).  Block count is bounded by the
    number of generator subsets.
    """
    tensor = jf.tensor
    n, m_rows, n_cols = tensor.shape
    if m_rows > n_cols:
        raise ValueError("more derivations than generators: no square minor")
    rk = pointwise_rank(jf, tol=tol, with_subsets=True)

    coefficients = np.full((n, m_rows, m_rows), np.nan)
    dets = np.zeros(n)
    subset_per_point: list = [None] * n
    blocks: dict = {}
    degenerate = []
    for x in range(n):
        if rk.ranks[x] < m_rows:
            degenerate.append(x)
            continue
        sub = rk.best_subsets[x]
        A = tensor[x][:, list(sub)]
        coefficients[x] = adjugate(A)
        dets[x] = np.linalg.det(A)
        subset_per_point[x] = sub
        blocks.setdefault(sub, []).append(x)
    blocks = {k: np.asarray(v, dtype=int) for k, v in blocks.items()}
    return OrthogonalBasisResult(
        jacobi=jf, subset_per_point=subset_per_point, coefficients=coefficients,
        dets=dets, blocks=blocks, degenerate=np.asarray(degenerate, dtype=int),
    )


# ---------------------------------------------------------------------------
# change of coordinates
# ---------------------------------------------------------------------------

@dataclass
class ChangeOfVariablesResult:
    matrix: np.ndarray        # T as an (N, N) matrix acting on coordinates
    transformed: np.ndarray   # [δ_i (T∘g)_j] at the base point, shape (M, N)
    diagonal: float           # δ_1 g_1 at the base point
    residual: float           # max |transformed - diagonal * [I | 0]|


def change_of_variables(dg0, tol: float = 1e-9) -> ChangeOfVariablesResult:
    """Linear map that flattens the tail generators at a base point.

    Input is the (M, N) Jacobi matrix at one point whose leading M x M minor
    is already orthogonal: zero off-diagonal and equal nonzero diagonal
    entries lam.  Then T_j(z) = z_j for j <= M and
    T_j(z) = lam z_j - sum_{i<=M} (δ_i g_j) z_i for j > M, which is invertible
    and maps the Jacobi matrix to lam [I_M | 0].
    """
    dg0 = np.asarray(dg0, dtype=float)
    m_rows, n_cols = dg0.shape
    if m_rows > n_cols:
        raise ValueError("need at least as many generators as derivations")
    lead = dg0[:, :m_rows]
    lam = lead[0, 0]
    if lam == 0.0:
        raise ValueError("leading diagonal entry is zero (precondition violated)")
    scale = max(abs(lam), 1e-300)
    off = lead - np.diag(np.diag(lead))
    if np.abs(off).max() > tol * scale:
        raise ValueError("leading minor is not orthogonalized (off-diagonal entries)")
    if np.abs(np.diag(lead) - lam).max() > tol * scale:
        raise ValueError("leading minor diagonal entries are not equal")

    T = np.zeros((n_cols, n_cols))
    for j in range(m_rows):
        T[j, j] = 1.0
    for j in range(m_rows, n_cols):
        T[j, j] = lam
        T[j, :m_rows] = -dg0[:, j]

    transformed = dg0 @ T.T
    target = np.zeros_like(transformed)
    target[:, :m_rows] = lam * np.eye(m_rows)
    residual = float(np.abs(transformed - target).max())
    return ChangeOfVariablesResult(matrix=T, transformed=transformed,
                                   diagonal=float(lam), residual=residual)


# ---------------------------------------------------------------------------
# pushforwards
# ---------------------------------------------------------------------------

@dataclass
class PushforwardResult:
    target_ids: list
    push_mu: np.ndarray
    fiber_indices: dict            # target id -> source index array
    delta: StencilDerivation
    space: FiniteMetricMeasureSpace
    label_index: np.ndarray        # per source point, target position

    def apply(self, pi_values_on_target) -> np.ndarray:
        """(ξ#δ)π(y): fibre mu-average of δ(π∘ξ), zero on empty fibres."""
        pi = np.asarray(pi_values_on_target, dtype=float)
        pulled = pi[self.label_index]
        dback = self.delta.apply(pulled)
        num = np.zeros(len(self.target_ids))
        np.add.at(num, self.label_index, self.space.weights * dback)
        out = np.zeros(len(self.target_ids))
        nz = self.push_mu > 0
        out[nz] = num[nz] / self.push_mu[nz]
        return out

    def duality_residual(self, phi_values_on_target, pi_values_on_target) -> float:
        """Relative defect of  sum_Y φ (ξ#δ)π ξ#μ  =  sum_X (φ∘ξ) δ(π∘ξ) μ."""
        phi = np.asarray(phi_values_on_target, dtype=float)
        pi = np.asarray(pi_values_on_target, dtype=float)
        lhs = float(np.sum(phi * self.apply(pi) * self.push_mu))
        pulled = pi[self.label_index]
        rhs = float(np.sum(phi[self.label_index] * self.delta.apply(pulled) * self.space.weights))
        return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def pushforward(space: FiniteMetricMeasureSpace, labels, delta: StencilDerivation,
                target_ids=None) -> PushforwardResult:
    """Transport the measure and the operator along a point map x -> label."""
    labels = [str(l) for l in labels]
    if len(labels) != space.n:
        raise ValueError("the map must assign a target label to every point")
    if target_ids is None:
        seen: dict = {}
        for l in labels:
            seen.setdefault(l, len(seen))
        target_ids = list(seen)
    else:
        target_ids = [str(t) for t in target_ids]
        missing = set(labels) - set(target_ids)
        if missing:
            raise ValueError(f"labels {sorted(missing)[:5]} missing from target ids")
    pos = {t: k for k, t in enumerate(target_ids)}
    label_index = np.asarray([pos[l] for l in labels], dtype=int)

    push_mu = np.zeros(len(target_ids))
    np.add.at(push_mu, label_index, space.weights)
    fibers = {t: np.where(label_index == k)[0] for k, t in enumerate(target_ids)}
    return PushforwardResult(target_ids=target_ids, push_mu=push_mu,
                             fiber_indices=fibers, delta=delta, space=space,
                             label_index=label_index)


# ---------------------------------------------------------------------------
# chain rule on ambient samples
# ---------------------------------------------------------------------------

def chain_rule_field(derivations, f: ScalarField, cond_cap: float = 1e12):
    """Recover v with  δ_k f = sum_i v_i δ_k x_i  by a per-point linear solve.

    Needs as many derivations as ambient dimensions; points with a singular
    coordinate matrix are skipped (v = NaN there) and reported.
    Returns (v, residual, skipped_indices).
    """
    derivations = list(derivations)
    space = derivations[0].space
    if space.ambient_coords is None:
        raise ValueError("chain rule recovery needs ambient coordinates")
    dim = space.ambient_coords.shape[1]
    if len(derivations) != dim:
        raise ValueError("need one derivation per ambient dimension")
    coords = [ScalarField(space, space.ambient_coords[:, i], name=f"x{i}") for i in range(dim)]
    jf = jacobi_matrix(derivations, coords)
    J = jf.tensor                                  # (n, dim, dim)
    b = np.stack([d.apply(f) for d in derivations], axis=1)  # (n, dim)

    v = np.full((space.n, dim), np.nan)
    residual = np.full(space.n, np.nan)
    skipped = []
    sigma = np.linalg.svd(J, compute_uv=False)
    bad = (sigma[:, -1] <= 0) | (sigma[:, 0] / np.maximum(sigma[:, -1], 1e-300) > cond_cap)
    good = ~bad
    if good.any():
        v[good] = np.linalg.solve(J[good], b[good][..., None])[..., 0]
        residual[good] = np.linalg.norm(
            np.einsum("xij,xj->xi", J[good], v[good]) - b[good], axis=1)
    skipped = np.where(bad)[0]
    return v, residual, skipped


# ---------------------------------------------------------------------------
# rank vs scale sweep
# ---------------------------------------------------------------------------

def rank_bound_experiment(space: FiniteMetricMeasureSpace, scales, generators,
                          budget: int, embedding_dim: int | None = None,
                          tol: float | None = None) -> list[dict]:
    """Essential rank of budgeted stencil sets across a scale grid.

    For each scale h the stencil set points along ± coordinate axes (then
    diagonals) at ambient step h; the row reports the essential rank, the
    (rank+1)-th singular-value ratio certifying dependence, the per-generator
    max |δ g|, and the bound check against an embedding dimension if given.
    """
    if budget < 2:
        raise ValueError("stencil budget must be >= 2")
    generators = list(generators)
    dim = space.ambient_coords.shape[1] if space.ambient_coords is not None else 1
    rows = []
    for h in scales:
        dirs = axis_direction_set(dim, budget)
        derivs = [build_stencil(space, "direction", float(h), direction=d,
                                name=f"dir{k}@{h:g}") for k, d in enumerate(dirs)]
        jf = jacobi_matrix(derivs, generators)
        rk = pointwise_rank(jf, tol=tol, with_subsets=False)
        r = rk.essential_rank
        ratio = float(rk.sigma_ratio(r).max()) if r < jf.m else 0.0
        max_abs = [float(np.abs(jf.tensor[:, :, j]).max()) for j in range(jf.n_generators)]
        row = {
            "scale": float(h),
            "essential_rank": int(r),
            "sigma_ratio": ratio,
            "rank_tol": rk.tol,
            "max_abs_per_generator": max_abs,
        }
        if embedding_dim is not None:
            row["rank_le_embedding_dim"] = bool(r <= embedding_dim)
        rows.append(row)
    return rows
