"""Multiscale snowflake embeddings into Euclidean space, with certification.

The construction is the classical one: dyadic scales r_k spanning the span
[min distance, diameter], an r_k-separated net per scale, a greedy colouring
that keeps same-coloured net points more than rho * r_k apart, and per-colour
tent coordinates of radius 2 r_k weighted r_k^s.  Scale phases share a fixed
block of coordinate slots, so the output dimension is (max colours) * block.
Both distortion constants are measured exactly by a pair sweep; nothing is
assumed from theory.

The composite-approximation routine rebuilds a field u through the embedding:
net-restricted approximations of the embedding and of u composed with the
local inverse on a ball, glued to u outside the doubled ball and extended to
the whole space with the minimal-slope extension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import ScalarField
from .lipschitz import global_lip, mcshane_extend, restriction_lip
from .nets import EpsilonNet
from .space import FiniteMetricMeasureSpace

__all__ = [
    "Coloring",
    "net_coloring",
    "EmbeddingResult",
    "assouad_embed",
    "DistortionAudit",
    "distortion_audit",
    "CompositeApprox",
    "composite_approximation",
]


@dataclass
class Coloring:
    colors: np.ndarray        # per net member, in net order
    n_colors: int
    packing_bound: int        # max net points in any rho*eps ball

    def classes(self) -> dict:
        return {c: np.where(self.colors == c)[0] for c in range(self.n_colors)}


def _greedy_color(space, idx, radius) -> tuple[np.ndarray, int]:
    """First-fit colouring over idx order; conflict when within `radius`."""
    k = len(idx)
    colors = np.full(k, -1, dtype=int)
    packing = 1
    for a in range(k):
        row = space.dist_row(int(idx[a]))[idx]
        conflicts = colors[(row <= radius) & (colors >= 0) & (np.arange(k) != a)]
        packing = max(packing, int(np.sum(row <= radius)))
        used = set(conflicts.tolist())
        c = 0
        while c in used:
            c += 1
        colors[a] = c
    return colors, packing


def net_coloring(space: FiniteMetricMeasureSpace, net: EpsilonNet, rho: float) -> Coloring:
    """Greedy colouring so same-coloured net points are > rho*eps apart.

    Greedy over the net in insertion order never needs more colours than the
    conflict-ball packing number, which is reported alongside.
    """
    if rho < 1:
        raise ValueError("separation factor rho must be >= 1")
    colors, packing = _greedy_color(space, net.indices, rho * net.epsilon)
    return Coloring(colors=colors, n_colors=int(colors.max()) + 1,
                    packing_bound=packing)


def _anchored_greedy_net(space, epsilon, start: int) -> np.ndarray:
    """Maximal epsilon-separated subset seeded with a chosen first member."""
    chosen = [int(start)]
    min_to_net = space.dist_row(int(start)).copy()
    for i in range(space.n):
        if min_to_net[i] >= epsilon:
            chosen.append(int(i))
            np.minimum(min_to_net, space.dist_row(int(i)), out=min_to_net)
    return np.asarray(sorted(set(chosen)), dtype=int)


@dataclass
class EmbeddingResult:
    space: FiniteMetricMeasureSpace
    s: float
    images: np.ndarray        # (n_points, dim)
    dim: int
    scales: list
    colors_per_scale: list
    block: int
    rho: float
    seed: int
    k_low: float              # min |Δζ| / d^s over pairs
    k_up: float               # max |Δζ| / d^s over pairs

    @property
    def distortion_ratio(self) -> float:
        return self.k_up / self.k_low if self.k_low > 0 else math.inf

    @property
    def constant(self) -> float:
        """Single two-sided constant K with K^-1 d^s <= |Δζ| <= K d^s."""
        if self.k_low <= 0:
            return math.inf
        return max(self.k_up, 1.0 / self.k_low)


def default_block(s: float) -> int:
    """Phase-block size keeping cross-scale interference geometrically small."""
    return max(math.ceil(3.0 / s), math.ceil(5.0 / (1.0 - s)))


def _cell_representatives(space, cell: float) -> np.ndarray:
    """First point (in id order) of each ambient dyadic cell of the given size.

    Anchoring layers to the fixed lattice (instead of re-running a greedy net)
    makes the construction canonical: refining the sampled space leaves the
    coarse-scale layers unchanged, so measured distortion is depth-stable.
    Covering radius is at most the cell diagonal; separation is not enforced
    (the colouring handles short-range conflicts).
    """
    coords = space.ambient_coords
    if coords is None:
        raise ValueError("the embedding needs ambient coordinates")
    keys = np.floor(coords / cell + 1e-12).astype(np.int64)
    seen: dict = {}
    for i in range(space.n):
        k = tuple(keys[i])
        if k not in seen:
            seen[k] = i
    return np.asarray(sorted(seen.values()), dtype=int)


def assouad_embed(space: FiniteMetricMeasureSpace, s: float,
                  scale_count: int | None = None, seed: int = 0,
                  rho: float = 12.0, block: int | None = None,
                  cell_fraction: float = 0.5) -> EmbeddingResult:
    """Snowflake embedding with measured two-sided distortion.

    s must lie in (0,1).  Scales are absolute dyadic levels 2^-k covering
    [min distance, 2 diam] (plus scale_count extra fine levels when given);
    per-scale anchors are dyadic-cell representatives at cell_fraction * r.
    The construction is canonical, so a fixed seed trivially reproduces it.
    """
    if not 0 < s < 1:
        raise ValueError("snowflake exponent s must lie in (0,1)")
    n = space.n
    diam = space.diameter()
    if block is None:
        block = default_block(s)
    if n == 1 or diam == 0:
        images = np.zeros((n, 1))
        return EmbeddingResult(space=space, s=s, images=images, dim=1, scales=[],
                               colors_per_scale=[], block=block,
                               rho=rho, seed=seed, k_low=math.inf, k_up=0.0)
    min_d = space.min_pairwise_distance()
    k_lo = math.floor(-math.log2(2.0 * diam))
    extra = 2 if scale_count is None else max(0, int(scale_count))
    k_hi = math.ceil(-math.log2(min_d)) + extra
    scales = [2.0 ** (-k) for k in range(k_lo, k_hi + 1)]

    layers = []
    colors_per_scale = []
    for r in scales:
        idx = _cell_representatives(space, cell_fraction * r)
        colors, _ = _greedy_color(space, idx, rho * r)
        layers.append((r, idx, colors))
        colors_per_scale.append(int(colors.max()) + 1)

    c_max = max(colors_per_scale)
    dim = c_max * block
    images = np.zeros((n, dim))
    for k, (r, idx, colors) in enumerate(layers):
        phase = k % block
        weight = r ** s
        for c in range(int(colors.max()) + 1):
            slot = c * block + phase
            bump = np.zeros(n)
            for p in idx[colors == c]:
                tent = 1.0 - space.dist_row(int(p)) / (2.0 * r)
                np.maximum(bump, np.maximum(tent, 0.0), out=bump)
            images[:, slot] += weight * bump

    audit = distortion_audit(space, images, s)
    return EmbeddingResult(space=space, s=s, images=images, dim=dim,
                           scales=scales, colors_per_scale=colors_per_scale,
                           block=block, rho=rho, seed=seed,
                           k_low=audit.k_low, k_up=audit.k_up)


@dataclass
class DistortionAudit:
    k_low: float
    k_up: float
    worst_low_pair: tuple     # ids achieving the min ratio
    worst_up_pair: tuple
    sampled: bool             # True when the pair sweep was subsampled
    coincident: bool          # distinct points with identical images


def distortion_audit(space: FiniteMetricMeasureSpace, images, s: float,
                     exact_limit: int = 2000, samples: int = 1_000_000,
                     seed: int = 0) -> DistortionAudit:
    """Measured min and max of |ζ(y)-ζ(x)| / d(x,y)^s over pairs."""
    images = np.asarray(images, dtype=float)
    n = space.n
    if images.shape[0] != n:
        raise ValueError("one image row per point required")
    k_low, k_up = math.inf, 0.0
    low_pair = up_pair = (space.point_ids[0], space.point_ids[0])
    sampled = n > exact_limit

    def consider(i, js):
        nonlocal k_low, k_up, low_pair, up_pair
        d = space.dist_row(i)[js] ** s
        z = np.linalg.norm(images[js] - images[i], axis=1)
        pos = d > 0
        if not pos.any():
            return
        ratios = z[pos] / d[pos]
        jsel = js[pos]
        a = int(np.argmin(ratios))
        b = int(np.argmax(ratios))
        if ratios[a] < k_low:
            k_low = float(ratios[a])
            low_pair = (space.point_ids[i], space.point_ids[int(jsel[a])])
        if ratios[b] > k_up:
            k_up = float(ratios[b])
            up_pair = (space.point_ids[i], space.point_ids[int(jsel[b])])

    if not sampled:
        for i in range(n - 1):
            consider(i, np.arange(i + 1, n))
    else:
        rng = np.random.default_rng(seed)
        per = max(1, samples // n)
        for i in range(n):
            js = rng.integers(0, n, size=per)
            consider(i, js[js != i])

    return DistortionAudit(k_low=k_low, k_up=k_up, worst_low_pair=low_pair,
                           worst_up_pair=up_pair, sampled=sampled,
                           coincident=(k_low == 0.0))


@dataclass
class CompositeApprox:
    field: ScalarField         # the rebuilt function on the whole space
    epsilon: float
    sup_error: float           # max |rebuilt - u|
    lip_u: float
    lip_measured: float        # global constant of the rebuilt field
    k_prime: float             # budgeted extra constant from the layer bounds
    bound_ok: bool             # lip_measured <= lip_u + k_prime
    layer_constants: dict


def composite_approximation(u: ScalarField, emb: EmbeddingResult, epsilon: float,
                            x0) -> CompositeApprox:
    """Rebuild u through the embedding near x0 and glue to u elsewhere.

    Steps: net-restrict the embedding and extend it minimally ([ζ]_eps); push
    u through the inverse images of the net points inside B(x0, eps); compose;
    keep u outside B(x0, 2 eps); extend the glued partial data to the space.
    The net is seeded with x0 itself, so the rebuilt field reproduces u(x0)
    exactly.  The budget constant is

        K' = L(u) K^(1/s) (2 eps)^(1-s) sqrt(dim) K eps^(s-1)

    with K the embedding's measured two-sided constant.
    """
    space = u.space
    i0 = space.index_of(x0)
    diam = space.diameter()
    min_d = space.min_pairwise_distance()
    if not (min_d <= epsilon <= 2 * diam):
        raise ValueError("epsilon must sit in the net-scale range of the space")

    net_idx = _anchored_greedy_net(space, epsilon, i0)

    ball_eps = space.ball_indices(i0, epsilon)
    ball_2eps = space.ball_indices(i0, 2 * epsilon)
    if ball_eps.size == 0:
        raise ValueError("empty ball at the requested scale")

    # embedding restricted to the net, re-extended componentwise
    zeta = emb.images
    zeta_eps = np.empty_like(zeta)
    comp_lips = []
    for m in range(zeta.shape[1]):
        ext = mcshane_extend(space, net_idx, zeta[net_idx, m])
        zeta_eps[:, m] = ext.values
        comp_lips.append(restriction_lip(space, net_idx, zeta[net_idx, m]))

    # u through the local inverse: values on images of net points in the ball
    anchors = np.intersect1d(net_idx, ball_eps)   # nonempty: x0 is in the net
    anchor_imgs = zeta[anchors]
    anchor_vals = u.values[anchors]
    l_loc = 0.0
    for a in range(anchors.size):
        dz = np.linalg.norm(anchor_imgs - anchor_imgs[a], axis=1)
        dv = np.abs(anchor_vals - anchor_vals[a])
        good = dz > 0
        if good.any():
            l_loc = max(l_loc, float((dv[good] / dz[good]).max()))

    def local_composite(rows) -> np.ndarray:
        z = zeta_eps[rows]
        cand = anchor_vals[None, :] + l_loc * np.linalg.norm(
            z[:, None, :] - anchor_imgs[None, :, :], axis=2)
        return cand.min(axis=1)

    domain = np.union1d(np.setdiff1d(np.arange(space.n), ball_2eps), ball_eps)
    values = np.empty(domain.size)
    in_ball = np.isin(domain, ball_eps)
    values[in_ball] = local_composite(domain[in_ball])
    values[~in_ball] = u.values[domain[~in_ball]]

    rebuilt = mcshane_extend(space, domain, values, name=f"{u.name or 'u'}~eps")

    lip_u = global_lip(u)
    lip_measured = global_lip(rebuilt)
    k_emb = emb.constant
    s = emb.s
    k_prime = (lip_u * k_emb ** (1.0 / s) * (2 * epsilon) ** (1.0 - s)
               * math.sqrt(emb.dim) * k_emb * epsilon ** (s - 1.0))
    sup_error = float(np.abs(rebuilt.values - u.values).max())
    return CompositeApprox(
        field=rebuilt, epsilon=float(epsilon), sup_error=sup_error,
        lip_u=lip_u, lip_measured=lip_measured, k_prime=k_prime,
        bound_ok=bool(lip_measured <= lip_u + k_prime + 1e-9 * max(1.0, lip_u)),
        layer_constants={
            "local_inverse_lip": l_loc,
            "net_component_lips_max": max(comp_lips) if comp_lips else 0.0,
            "anchors": int(anchors.size),
            "net_size": int(net_idx.size),
        },
    )
