"""Separated nets and the inf-convolution approximation over a net.

A net at separation eps is an eps-separated subset; greedy construction makes
it maximal, so every point of the space lies within eps of the net (measured
covering radius <= eps).  The quality constant C = covering_radius / eps is
reported rather than assumed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import ScalarField
from .lipschitz import global_lip
from .space import FiniteMetricMeasureSpace

__all__ = ["EpsilonNet", "build_net", "net_metrics", "piecewise_distance_approx"]


@dataclass
class EpsilonNet:
    space: FiniteMetricMeasureSpace
    indices: np.ndarray          # net members, in insertion order
    epsilon: float
    separation: float            # measured min pairwise distance within the net
    covering_radius: float       # measured max distance from any point to the net

    @property
    def quality(self) -> float:
        """C = covering_radius / epsilon (0 when the net is the whole space)."""
        return self.covering_radius / self.epsilon

    @property
    def point_ids(self) -> list[str]:
        return self.space.ids_of(self.indices)


def net_metrics(space: FiniteMetricMeasureSpace, indices) -> tuple[float, float]:
    idx = np.asarray(indices, dtype=int)
    if idx.size == 0:
        raise ValueError("net must be nonempty")
    sep = np.inf
    cover = np.zeros(space.n)
    cover[:] = np.inf
    for a, i in enumerate(idx):
        row = space.dist_row(int(i))
        np.minimum(cover, row, out=cover)
        others = np.delete(idx, a)
        if others.size:
            sep = min(sep, float(row[others].min()))
    return (0.0 if idx.size == 1 else float(sep)), float(cover.max())


def build_net(space: FiniteMetricMeasureSpace, epsilon: float,
              strategy: str = "greedy_scan", seed: int = 0) -> EpsilonNet:
    """Maximal eps-separated subset.

    greedy_scan sweeps points in id order and keeps any point at distance
    >= eps from all kept points (the seed is unused).  farthest_point starts
    from a seed-chosen point and repeatedly adds the point farthest from the
    current net while that distance is >= eps.  Both are maximal, so the
    measured covering radius is < eps.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = space.n
    if strategy == "greedy_scan":
        chosen: list[int] = []
        min_to_net = np.full(n, np.inf)
        for i in range(n):
            if min_to_net[i] >= epsilon:
                chosen.append(i)
                np.minimum(min_to_net, space.dist_row(i), out=min_to_net)
    elif strategy == "farthest_point":
        rng = np.random.default_rng(seed)
        start = int(rng.integers(n))
        chosen = [start]
        min_to_net = space.dist_row(start).copy()
        while True:
            far = int(np.argmax(min_to_net))
            if min_to_net[far] < epsilon:
                break
            chosen.append(far)
            np.minimum(min_to_net, space.dist_row(far), out=min_to_net)
    else:
        raise ValueError(f"unknown net strategy {strategy!r}")

    idx = np.asarray(chosen, dtype=int)
    sep, cover = net_metrics(space, idx)
    return EpsilonNet(space=space, indices=idx, epsilon=float(epsilon),
                      separation=sep, covering_radius=cover)


def piecewise_distance_approx(u: ScalarField, net: EpsilonNet) -> ScalarField:
    """[u]_eps(x) = min over net points x' of  u(x') + L(u) d(x, x').

    Majorises u pointwise, agrees with u on the net, stays L(u)-Lipschitz,
    and deviates by at most 2 L(u) covering_radius.
    """
    space = u.space
    if net.space is not space and net.space.point_ids != space.point_ids:
        raise ValueError("net and field live on different spaces")
    L = global_lip(u)
    out = np.full(space.n, np.inf)
    for i in net.indices:
        np.minimum(out, u.values[int(i)] + L * space.dist_row(int(i)), out=out)
    # each term is >= u(x) in exact arithmetic; clamp rounding dips
    np.maximum(out, u.values, out=out)
    return ScalarField(space, out, name=f"[{u.name or 'u'}]_eps")
