"""Ordering-based (Kuhn) triangulation of R^N at dyadic scale 2^-n.

Each lattice cube splits into N! simplices, one per descending order of the
fractional coordinates; walking the cube diagonal one axis at a time in that
order enumerates the simplex vertices.  Point location and barycentric
coordinates follow directly from sorting the fractional parts, with ties
broken by coordinate index so boundary queries are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["KuhnTriangulation", "locate_simplex", "pl_extend", "PLExtension"]


@dataclass(frozen=True)
class KuhnTriangulation:
    dim: int
    level: int  # lattice spacing is 2^-level

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")

    @property
    def scale(self) -> float:
        return 2.0 ** (-self.level)


def locate_simplex(tri: KuhnTriangulation, z) -> tuple[np.ndarray, np.ndarray]:
    """(vertices, barycentric) for the simplex containing z.

    Vertices are integer lattice coordinates, shape (N+1, N); multiplying by
    tri.scale recovers ambient positions.  Coordinates are nonnegative, sum
    to one and reproduce z via sum_i lambda_i * scale * v_i.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (tri.dim,):
        raise ValueError(f"query must have {tri.dim} coordinates")
    if not np.all(np.isfinite(z)):
        raise ValueError("query coordinates must be finite")
    u = z / tri.scale
    base = np.floor(u).astype(int)
    theta = u - base
    # clip guards against floor(u) == u - eps artefacts
    theta = np.clip(theta, 0.0, 1.0)
    order = np.argsort(-theta, kind="stable")

    verts = np.empty((tri.dim + 1, tri.dim), dtype=int)
    verts[0] = base
    for j, axis in enumerate(order):
        verts[j + 1] = verts[j]
        verts[j + 1, axis] += 1

    lam = np.empty(tri.dim + 1)
    sorted_theta = theta[order]
    lam[0] = 1.0 - sorted_theta[0]
    lam[1:-1] = sorted_theta[:-1] - sorted_theta[1:]
    lam[-1] = sorted_theta[-1]
    return verts, lam


@dataclass
class PLExtension:
    values: np.ndarray          # one per query
    gradients: np.ndarray       # per-query simplex gradient, shape (m, N)
    max_gradient_norm: float    # proxy for the extension's Lipschitz constant
    vertex_pair_lip: float      # pairwise constant of the vertex data
    ratio: float                # max_gradient_norm / vertex_pair_lip (inf if 0)


def pl_extend(tri: KuhnTriangulation, vertex_values: dict, queries) -> PLExtension:
    """Evaluate the piecewise-linear extension of lattice data at queries.

    `vertex_values` maps integer lattice tuples to reals.  On each simplex
    the extension is affine, so its gradient is constant: walking the Kuhn
    vertex chain, consecutive vertices differ by one lattice step along one
    axis, giving gradient components (f(v_{j+1}) - f(v_j)) / scale.
    Raises on any queried simplex with a missing vertex value.
    """
    data = {tuple(int(c) for c in k): float(v) for k, v in vertex_values.items()}
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    if queries.shape[1] != tri.dim:
        raise ValueError("query dimension mismatch")

    m = queries.shape[0]
    values = np.empty(m)
    gradients = np.empty((m, tri.dim))
    for q in range(m):
        verts, lam = locate_simplex(tri, queries[q])
        fvals = np.empty(tri.dim + 1)
        for j, v in enumerate(verts):
            key = tuple(v)
            if key not in data:
                raise ValueError(f"missing vertex value at lattice point {key}")
            fvals[j] = data[key]
        values[q] = float(np.dot(lam, fvals))
        grad = np.zeros(tri.dim)
        steps = np.argmax(np.diff(verts, axis=0), axis=1)
        grad[steps] = np.diff(fvals) / tri.scale
        gradients[q] = grad

    max_grad = float(np.linalg.norm(gradients, axis=1).max()) if m else 0.0
    pair_lip = _vertex_pair_lip(data, tri.scale)
    ratio = max_grad / pair_lip if pair_lip > 0 else (np.inf if max_grad > 0 else 1.0)
    return PLExtension(values=values, gradients=gradients,
                       max_gradient_norm=max_grad,
                       vertex_pair_lip=pair_lip, ratio=ratio)


def _vertex_pair_lip(data: dict, scale: float) -> float:
    keys = list(data)
    if len(keys) < 2:
        return 0.0
    pts = np.asarray(keys, dtype=float) * scale
    vals = np.asarray([data[k] for k in keys])
    best = 0.0
    for a in range(len(keys) - 1):
        d = np.linalg.norm(pts[a + 1:] - pts[a], axis=1)
        dv = np.abs(vals[a + 1:] - vals[a])
        mask = d > 0
        if mask.any():
            best = max(best, float((dv[mask] / d[mask]).max()))
    return best
