"""Minimal-norm pointwise gradients for the two-point slope inequality

    |u(x) - u(y)| <= (g(x) + g(y)) * d(x, y)     for all pairs x != y.

For p = inf the optimum is the constant  t* = max |u(x)-u(y)| / (2 d(x,y)):
any feasible g has max g >= t* (look at the maximising pair) and the constant
t* is feasible, with equality on that pair.

For finite p the solver minimises (sum mu g^p)^(1/p) by projected subgradient
descent from the p = inf constant (step c/sqrt(k), feasibility restored after
every step by monotone pair repairs), followed by an active-set polish that
solves the stationarity system on the detected tight pairs.  A zooming
dense-grid oracle over [0, max-slope]^n is provided for cross-checking small
instances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import ScalarField

__all__ = [
    "HajlaszGradient",
    "HajlaszConvergenceError",
    "pair_constraints",
    "hajlasz_norm",
    "hajlasz_gradient",
    "hajlasz_oracle_grid",
]

_FEAS_ABS = 1e-9  # contract: constraints hold within this absolute slack


class HajlaszConvergenceError(RuntimeError):
    """Solver hit the iteration cap; carries the best feasible iterate."""

    def __init__(self, message, best: "HajlaszGradient"):
        super().__init__(message)
        self.best = best


@dataclass
class HajlaszGradient:
    p: float
    g: np.ndarray
    norm: float
    iterations: int
    max_violation: float
    polished: bool = False


def pair_constraints(space, values) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(i, j, c) arrays over unordered pairs with c = |u_i - u_j| / d_ij."""
    n = space.n
    iu, jv = np.triu_indices(n, k=1)
    if iu.size == 0:
        return iu, jv, np.empty(0)
    v = np.asarray(values, dtype=float)
    d = np.empty(iu.size)
    pos = 0
    for i in range(n - 1):
        row = space.dist_row(i)
        count = n - 1 - i
        d[pos:pos + count] = row[i + 1:]
        pos += count
    c = np.abs(v[iu] - v[jv]) / d
    return iu, jv, c


def hajlasz_norm(space, g, p) -> float:
    g = np.asarray(g, dtype=float)
    if math.isinf(p):
        return float(g.max()) if g.size else 0.0
    return float(np.sum(space.weights * g ** p) ** (1.0 / p))


def _max_deficit(g, iu, jv, c) -> np.ndarray:
    """Per-point worst slack violation over incident pair constraints."""
    gap = c - (g[iu] + g[jv])
    out = np.zeros_like(g)
    if gap.size:
        np.maximum.at(out, iu, gap)
        np.maximum.at(out, jv, gap)
    return np.maximum(out, 0.0)


def _repair(g, iu, jv, c, passes: int = 60) -> np.ndarray:
    """Restore feasibility by raising g; increases never break constraints."""
    g = np.maximum(g, 0.0)
    for _ in range(passes):
        deficit = _max_deficit(g, iu, jv, c)
        if not deficit.any():
            return g
        g = g + 0.5 * deficit
    # one full-deficit pass guarantees feasibility
    return g + _max_deficit(g, iu, jv, c)


def _worst_violation(g, iu, jv, c) -> float:
    if iu.size == 0:
        return 0.0
    return float(np.maximum(c - (g[iu] + g[jv]), 0.0).max())


def _kkt_on_active(mu, p, iu_a, jv_a, c_a, n):
    """Solve  p*mu_x*g_x^(p-1) = sum of multipliers at x,  g_x + g_y = c_a.

    Returns (g, lambda) or None.  Linear for p = 2; damped Newton in the
    multipliers otherwise, using g(s) = (s / (p mu))^(1/(p-1)).
    """
    m = iu_a.size
    B = np.zeros((m, n))
    B[np.arange(m), iu_a] = 1.0
    B[np.arange(m), jv_a] = 1.0
    if p == 2:
        M = (B / (2.0 * mu)) @ B.T
        lam, *_ = np.linalg.lstsq(M, c_a, rcond=None)
        g = (B.T @ lam) / (2.0 * mu)
        return g, lam

    def g_of(s):
        return (np.maximum(s, 0.0) / (p * mu)) ** (1.0 / (p - 1.0))

    lam = np.full(m, max(c_a.max(), 1e-12))
    for _ in range(80):
        s = B.T @ lam
        g = g_of(s)
        res = B @ g - c_a
        if np.abs(res).max() <= 1e-13 * max(1.0, c_a.max()):
            return g, lam
        with np.errstate(divide="ignore"):
            gp = np.where(s > 0,
                          g / np.maximum(s, 1e-300) / (p - 1.0),
                          0.0)
        J = (B * gp) @ B.T
        try:
            step = np.linalg.lstsq(J + 1e-14 * np.eye(m), -res, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        alpha = 1.0
        base = np.abs(res).max()
        for _bt in range(40):
            trial = lam + alpha * step
            r2 = np.abs(B @ g_of(B.T @ trial) - c_a).max()
            if r2 < base:
                lam = trial
                break
            alpha *= 0.5
        else:
            return None
    return None


def _active_set_polish(space, p, iu, jv, c, g0, rounds: int = 60):
    """Refine a feasible iterate by solving on the near-tight constraints."""
    mu = space.weights
    n = space.n
    scale = max(float(c.max()), 1e-300)
    act = np.where(g0[iu] + g0[jv] - c <= 1e-5 * scale)[0]
    active = list(act)
    if not active:
        return None
    for _ in range(rounds):
        a = np.asarray(sorted(set(active)), dtype=int)
        sol = _kkt_on_active(mu, p, iu[a], jv[a], c[a], n)
        if sol is None:
            return None
        g, lam = sol
        if lam.size and lam.min() < -1e-9 * scale:
            drop = a[int(np.argmin(lam))]
            active = [x for x in a if x != drop]
            if not active:
                return None
            continue
        g = np.maximum(g, 0.0)
        gap = c - (g[iu] + g[jv])
        worst = float(gap.max()) if gap.size else 0.0
        if worst > 1e-9 * scale:
            active = list(a) + [int(np.argmax(gap))]
            continue
        return _repair(g, iu, jv, c)
    return None


def hajlasz_gradient(u: ScalarField, p: float, tol: float = 1e-9,
                     max_iters: int = 100_000, polish: bool = True) -> HajlaszGradient:
    """Feasible per-point gradient minimising the weighted p-norm.

    p must lie in (1, inf].  The p = inf answer is the closed-form constant;
    finite p runs the iterative scheme.  Raises HajlaszConvergenceError
    (carrying the best feasible iterate) if nothing converged by the cap.
    """
    if not (p > 1):
        raise ValueError("exponent p must satisfy p > 1")
    space = u.space
    iu, jv, c = pair_constraints(space, u.values)
    t_star = float(c.max()) / 2.0 if c.size else 0.0

    if math.isinf(p):
        g = np.full(space.n, t_star)
        return HajlaszGradient(p=p, g=g, norm=hajlasz_norm(space, g, p),
                               iterations=0, max_violation=_worst_violation(g, iu, jv, c))

    if t_star == 0.0:
        g = np.zeros(space.n)
        return HajlaszGradient(p=p, g=g, norm=0.0, iterations=0, max_violation=0.0)

    mu = space.weights
    g = np.full(space.n, t_star)
    best = g.copy()
    best_norm = hajlasz_norm(space, g, p)
    step0 = 0.5 * t_star
    window_best = best_norm
    stalled = 0
    settled = False
    k = 0
    for k in range(1, max_iters + 1):
        grad = p * mu * np.maximum(g, 0.0) ** (p - 1.0)
        gn = float(np.linalg.norm(grad))
        if gn > 0:
            g = g - (step0 / math.sqrt(k)) * grad / gn
        g = _repair(g, iu, jv, c)
        norm = hajlasz_norm(space, g, p)
        if norm < best_norm:
            best_norm, best = norm, g.copy()
        if k % 500 == 0:
            if window_best - best_norm <= 1e-12 * max(best_norm, 1e-300):
                stalled += 1
                if stalled >= 2:
                    settled = True
                    break
            else:
                stalled = 0
            window_best = best_norm

    polished = False
    if polish:
        refined = _active_set_polish(space, p, iu, jv, c, best)
        if refined is not None:
            rnorm = hajlasz_norm(space, refined, p)
            # the stationarity solve corroborates the iterate even when equal
            if rnorm <= best_norm + 1e-12 * max(best_norm, 1e-300):
                if rnorm < best_norm:
                    best, best_norm = refined, rnorm
                polished = True

    violation = _worst_violation(best, iu, jv, c)
    result = HajlaszGradient(p=p, g=best, norm=best_norm, iterations=k,
                             max_violation=violation, polished=polished)
    if violation > _FEAS_ABS:
        raise HajlaszConvergenceError(
            f"solver stopped with constraint violation {violation:.3e}", result)
    if k >= max_iters and not settled and not polished:
        raise HajlaszConvergenceError(
            f"no convergence within {max_iters} iterations", result)
    return result


def _batch_repair(G, iu, jv, c, passes: int = 6) -> np.ndarray:
    """Row-wise feasibility repair for a batch of candidate gradients."""
    G = np.maximum(G, 0.0)
    for step in range(passes + 1):
        deficit = np.zeros_like(G)
        for k in range(iu.size):
            gap = c[k] - G[:, iu[k]] - G[:, jv[k]]
            np.maximum(deficit[:, iu[k]], gap, out=deficit[:, iu[k]])
            np.maximum(deficit[:, jv[k]], gap, out=deficit[:, jv[k]])
        deficit = np.maximum(deficit, 0.0)
        if not deficit.any():
            return G
        G = G + (deficit if step == passes else 0.5 * deficit)
    return G


def _coordinate_sweeps(g, iu, jv, c, n, sweeps: int = 60) -> np.ndarray:
    """Exact per-coordinate minimisation (each g_x drops to its lower bound)."""
    incident: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k in range(iu.size):
        incident[iu[k]].append((k, jv[k]))
        incident[jv[k]].append((k, iu[k]))
    g = g.copy()
    for _ in range(sweeps):
        moved = 0.0
        for x in range(n):
            lb = 0.0
            for k, y in incident[x]:
                lb = max(lb, c[k] - g[y])
            if lb < g[x]:
                moved = max(moved, g[x] - lb)
                g[x] = lb
        if moved <= 1e-16:
            break
    return g


def _zoom(space, p, iu, jv, c, upper, start, width0, per_dim, levels, margin):
    n = space.n
    incumbent = start.copy()
    inc_norm = hajlasz_norm(space, incumbent, p)
    lo = np.clip(incumbent - width0 / 2, 0.0, upper)
    hi = np.clip(incumbent + width0 / 2, lo + 1e-300, upper)
    for _ in range(levels):
        axes = [np.linspace(lo[d], hi[d], per_dim) for d in range(n)]
        G = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
        G = np.vstack([G, incumbent[None, :]])
        G = _batch_repair(G, iu, jv, c)
        vals = np.sum(space.weights * G ** p, axis=1)
        cand = _coordinate_sweeps(G[int(np.argmin(vals))], iu, jv, c, n)
        val = hajlasz_norm(space, cand, p)
        if val < inc_norm:
            inc_norm, incumbent = val, cand
        width = hi - lo
        h = width / (per_dim - 1)
        half = np.maximum(0.30 * width, margin * h)
        lo = np.clip(incumbent - half, 0.0, upper)
        hi = np.clip(incumbent + half, lo + 1e-300, upper)
        if float(width.max()) <= 1e-13 * max(float(upper.max()), 1.0):
            break
    return incumbent, inc_norm


def hajlasz_oracle_grid(u: ScalarField, p: float) -> tuple[np.ndarray, float]:
    """Dense-grid reference optimum over [0, max incident slope]^n.

    Zooming grids are projected onto the feasible boundary before evaluation
    (candidates are repaired upward, then slid down coordinate-wise), and the
    search restarts from progressively tighter boxes around the incumbent.
    Exponential in the point count; refuses n > 6.
    """
    space = u.space
    n = space.n
    if n > 6:
        raise ValueError("grid oracle is limited to spaces with <= 6 points")
    iu, jv, c = pair_constraints(space, u.values)
    if math.isinf(p):
        # independent slow path: explicit pair loop
        best = 0.0
        for a in range(n):
            row = space.dist_row(a)
            for b in range(n):
                if a != b:
                    best = max(best, abs(u.values[a] - u.values[b]) / (2 * row[b]))
        g = np.full(n, best)
        return g, hajlasz_norm(space, g, p)
    if c.size == 0 or c.max() == 0.0:
        return np.zeros(n), 0.0

    upper = np.zeros(n)
    np.maximum.at(upper, iu, c)
    np.maximum.at(upper, jv, c)
    per_dim = 9 if n <= 4 else (6 if n == 5 else 5)
    margin = 2.2 if n <= 4 else 1.6

    inc, val = _zoom(space, p, iu, jv, c, upper, upper.copy(),
                     2 * float(upper.max()) * np.ones(n), per_dim, 70, margin)
    for r in range(3):
        width0 = float(upper.max()) * (0.3 / 3 ** r) * np.ones(n)
        inc2, val2 = _zoom(space, p, iu, jv, c, upper, inc, width0,
                           per_dim, 55, margin)
        if val2 < val:
            inc, val = inc2, val2
    inc = _repair(inc, iu, jv, c)
    return inc, hajlasz_norm(space, inc, p)
