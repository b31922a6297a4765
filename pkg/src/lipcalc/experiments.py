"""Named experiment runs: each reproduces one measured phenomenon end to end.

  E1  doubling ratios across scales (segment vs ternary dust)
  E2  slope-ratio statistics, Euclidean grid vs ternary dust
  E3  Jacobi rank vs scale, and first-difference decay under snowflaking
  E4  embedding distortion vs exponent, with depth-stability certification
  E5  estimated differentials vs analytic gradients on a plane grid
  E6  product-rule defect scaling on refining 1D grids
  E7  minimal upper-gradient solver vs the dense-grid reference

A run writes CSV tables (the artifact of record), one figure, and a JSON
manifest into  <out_dir>/<experiment>/ .  Re-running a manifest reproduces
the CSV bytes exactly; `replay` verifies that.  The process exit code of the
CLI runner is 0 only when every in-run assertion passed.
"""
from __future__ import annotations

import math
import os
import shutil
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .derivations import (build_stencil, rank_bound_experiment, leibniz_defect)
from .differentiability import Chart, estimate_differential, lipderiv_check, residual_profile
from .embedding import assouad_embed
from .fields import ScalarField
from .hajlasz import hajlasz_gradient, hajlasz_norm, hajlasz_oracle_grid
from .io import read_json, write_json
from .lipschitz import liplip_ratio
from .reporting import Table, render_figures, write_tables
from .space import FiniteMetricMeasureSpace, SpaceSpec, doubling_stats, generate_space

__all__ = ["REGISTRY", "run_experiment", "replay", "list_experiments",
           "Assertion", "RunResult", "ReplayResult"]


@dataclass
class Assertion:
    name: str
    passed: bool
    detail: str


@dataclass
class RunResult:
    experiment: str
    run_dir: str
    manifest_path: str
    passed: bool
    assertions: list


@dataclass
class ReplayResult:
    identical: bool
    compared: list
    diffs: list
    missing: list


def _weighted_percentile(values, weights, q):
    order = np.argsort(values)
    v, w = np.asarray(values)[order], np.asarray(weights)[order]
    cw = np.cumsum(w) / w.sum()
    return float(v[min(int(np.searchsorted(cw, q)), len(v) - 1)])


def _loglog_slope(xs, ys):
    return float(np.polyfit(np.log(np.asarray(xs)), np.log(np.asarray(ys)), 1)[0])


def _cantor_spec(depth):
    return SpaceSpec("cantor_ifs", {"ratios": [1 / 3, 1 / 3],
                                    "offsets": [[0.0], [2 / 3]], "depth": depth})


# ---------------------------------------------------------------------------
# E1: doubling sweep
# ---------------------------------------------------------------------------

def _exp_doubling(cfg):
    rows, assertions = [], []
    seg = generate_space(SpaceSpec("path_graph", {"n": int(cfg["segment_points"]), "step": 1.0}))
    radii = [float(r) for r in cfg["segment_radii"]]
    st = doubling_stats(seg, radii)
    for r, k, wit in zip(st.radii, st.kappa, st.argmax_points):
        rows.append(["segment", r, k, wit])
    assertions.append(Assertion(
        "segment_kappa_below_2", bool(st.kappa_max < 2.0),
        f"max kappa {st.kappa_max:.6f}"))

    kappa_by_depth = {}
    for depth in cfg["cantor_depths"]:
        dust = generate_space(_cantor_spec(int(depth)))
        radii = [3.0 ** (-k) for k in range(1, int(cfg["cantor_radius_levels"]) + 1)]
        st = doubling_stats(dust, radii)
        kappa_by_depth[depth] = st.kappa
        for r, k, wit in zip(st.radii, st.kappa, st.argmax_points):
            rows.append([f"cantor_depth{depth}", r, k, wit])
    depths = list(cfg["cantor_depths"])
    if len(depths) >= 2:
        a, b = kappa_by_depth[depths[0]], kappa_by_depth[depths[1]]
        m = min(len(a), len(b))
        drift = float(np.abs(a[:m] / b[:m] - 1.0).max())
        assertions.append(Assertion(
            "cantor_kappa_depth_stable", bool(drift <= 0.25),
            f"max relative drift across depths {drift:.4f}"))
    return [Table("doubling", ["space", "radius", "kappa", "witness"], rows)], assertions


# ---------------------------------------------------------------------------
# E2: slope-ratio statistics
# ---------------------------------------------------------------------------

def _grid_family(space):
    x1 = space.ambient_coords[:, 0]
    x2 = space.ambient_coords[:, 1]
    return [ScalarField(space, x1, "x1"), ScalarField(space, x2, "x2"),
            ScalarField(space, x1 * x2, "x1x2"), ScalarField(space, x1 ** 2, "x1sq")]


def _exp_liplip(cfg):
    assertions = []
    step = float(cfg["grid_step"])
    grid = generate_space(SpaceSpec("euclidean_grid", {"dim": 2, "step": step,
                                                       "extent": cfg["grid_extent"]}))
    family = _grid_family(grid)
    scales = [4 * step, 2 * step, step]
    worst = np.ones(grid.n)
    rows_e = []
    for f in family:
        for i in range(grid.n):
            worst[i] = max(worst[i], liplip_ratio(f, i, scales, warn=False))
    for i in range(grid.n):
        rows_e.append([grid.point_ids[i], worst[i]])
    p99 = _weighted_percentile(worst, grid.weights, 0.99)
    assertions.append(Assertion(
        "euclidean_ratio_p99", bool(p99 <= 1.5), f"99th percentile {p99:.4f}"))

    dust = generate_space(_cantor_spec(int(cfg["cantor_depth"])))
    min_d = dust.min_pairwise_distance()
    cscales = [27 * min_d, 9 * min_d, 3 * min_d]
    coord = ScalarField(dust, dust.ambient_coords[:, 0], "coord")
    anchor = dust.dist_row(0)
    fam_c = [coord, ScalarField(dust, anchor, "dist0")]
    worst_c = np.ones(dust.n)
    for f in fam_c:
        for i in range(dust.n):
            worst_c[i] = max(worst_c[i], liplip_ratio(f, i, cscales, warn=False))
    rows_c = [[dust.point_ids[i], worst_c[i]] for i in range(dust.n)]
    p99_c = _weighted_percentile(worst_c[np.isfinite(worst_c)],
                                 dust.weights[np.isfinite(worst_c)], 0.99)
    summary = Table("summary", ["space", "p99_ratio"],
                    [["euclidean", p99], ["cantor", p99_c]])
    return [Table("ratios_euclidean", ["point_id", "ratio"], rows_e),
            Table("ratios_cantor", ["point_id", "ratio"], rows_c),
            summary], assertions


# ---------------------------------------------------------------------------
# E3: rank vs scale, degeneration on snowflakes
# ---------------------------------------------------------------------------

def _exp_rank(cfg):
    assertions = []
    rank_rows = []
    step = float(cfg["grid_step"])
    grid = generate_space(SpaceSpec("euclidean_grid", {"dim": 2, "step": step,
                                                       "extent": [0.0, 1.0]}))
    gens2 = _grid_family(grid)
    scales2 = [step * m for m in cfg["scale_multipliers"]]
    for row in rank_bound_experiment(grid, scales2, gens2, budget=4):
        rank_rows.append(["grid2d", row["scale"], row["essential_rank"], row["sigma_ratio"]])
        ok = row["essential_rank"] == 2 and row["sigma_ratio"] <= 10 * row["scale"]
        assertions.append(Assertion(
            f"grid2d_rank_at_h_{row['scale']:g}", bool(ok),
            f"rank {row['essential_rank']}, ratio {row['sigma_ratio']:.3e} vs 10h {10*row['scale']:.3e}"))

    line = generate_space(SpaceSpec("euclidean_grid", {"dim": 1, "step": step, "extent": [0.0, 1.0]}))
    x = line.ambient_coords[:, 0]
    gens1 = [ScalarField(line, x, "x"), ScalarField(line, x ** 2, "xsq")]
    for row in rank_bound_experiment(line, scales2[:2], gens1, budget=2):
        rank_rows.append(["grid1d", row["scale"], row["essential_rank"], row["sigma_ratio"]])
        assertions.append(Assertion(
            f"grid1d_rank_at_h_{row['scale']:g}", row["essential_rank"] == 1,
            f"rank {row['essential_rank']}"))

    deg_rows = []
    base = SpaceSpec("euclidean_grid", {"dim": 1, "step": float(cfg["snowflake_step"]),
                                        "extent": [0.0, 1.0]})
    hs = [2.0 ** (-k) for k in cfg["snowflake_scale_exponents"]]
    for s in [None] + [float(v) for v in cfg["snowflake_exponents"]]:
        spec = base if s is None else SpaceSpec("snowflake", {"s": s, "base": base.to_dict()})
        sp = generate_space(spec)
        ident = ScalarField(sp, sp.ambient_coords[:, 0], "id")
        tag = "flat" if s is None else f"s{s:g}"
        maxes = []
        for h in hs:
            st = build_stencil(sp, "direction", h, direction=[1.0])
            maxes.append(float(np.abs(st.apply(ident)).max()))
            deg_rows.append([tag, h, maxes[-1]])
        slope = _loglog_slope(hs, maxes)
        if s is None:
            ok = abs(slope) <= 0.05
            assertions.append(Assertion("degeneration_flat_slope", bool(ok),
                                        f"slope {slope:.4f} (want 0 +- 0.05)"))
        else:
            ok = abs(slope - (1 - s)) <= 0.1
            assertions.append(Assertion(f"degeneration_slope_s{s:g}", bool(ok),
                                        f"slope {slope:.4f} (want {1-s:g} +- 0.1)"))
    return [Table("rank_vs_scale", ["space", "scale", "essential_rank", "sigma_ratio"], rank_rows),
            Table("degeneration", ["space", "scale", "max_abs_first_diff"], deg_rows)], assertions


# ---------------------------------------------------------------------------
# E4: embedding distortion
# ---------------------------------------------------------------------------

def _exp_embedding(cfg):
    assertions = []
    rows = []
    s_grid = [float(s) for s in cfg["s_grid"]]
    zoo = {
        "cantor6": _cantor_spec(6),
        "path16": SpaceSpec("path_graph", {"n": 16, "step": 1.0}),
        "path64": SpaceSpec("path_graph", {"n": 64, "step": 1.0}),
        "grid2d": SpaceSpec("euclidean_grid", {"dim": 2, "step": 0.125, "extent": [0.0, 1.0]}),
        "random64": SpaceSpec("random_points", {"n": 64, "dim": 2, "seed": 5}),
    }
    for name, spec in zoo.items():
        sp = generate_space(spec)
        for s in s_grid:
            emb = assouad_embed(sp, s)
            rows.append([name, s, emb.k_low, emb.k_up, emb.distortion_ratio, emb.dim])
            assertions.append(Assertion(
                f"k_low_positive_{name}_s{s:g}", bool(emb.k_low > 0),
                f"K_low {emb.k_low:.4f}"))

    ratios = {}
    for depth in (6, 7):
        sp = generate_space(_cantor_spec(depth))
        emb = assouad_embed(sp, 0.5)
        ratios[depth] = emb.distortion_ratio
        rows.append([f"cantor{depth}", 0.5, emb.k_low, emb.k_up, emb.distortion_ratio, emb.dim])
    drift = abs(ratios[7] / ratios[6] - 1.0)
    assertions.append(Assertion(
        "cantor_ratio_depth_stable", bool(drift <= 0.10),
        f"ratio {ratios[6]:.4f} -> {ratios[7]:.4f}, drift {drift:.4f}"))
    return [Table("distortion", ["space", "s", "k_low", "k_up", "ratio", "dim"], rows)], assertions


# ---------------------------------------------------------------------------
# E5: differentials vs gradients
# ---------------------------------------------------------------------------

def _exp_differential(cfg):
    assertions = []
    step = float(cfg["grid_step"])
    grid = generate_space(SpaceSpec("euclidean_grid", {"dim": 2, "step": step,
                                                       "extent": [0.0, 1.0]}))
    x1 = grid.ambient_coords[:, 0]
    x2 = grid.ambient_coords[:, 1]
    f = ScalarField(grid, x1 ** 2 + x1 * x2, "f")
    grad = np.stack([2 * x1 + x2, x1], axis=1)
    chart = Chart(grid, np.arange(grid.n),
                  [ScalarField(grid, x1, "x1"), ScalarField(grid, x2, "x2")])
    rng = np.random.default_rng(int(cfg["sample_seed"]))
    sample = np.sort(rng.choice(grid.n, int(cfg["sample_points"]), replace=False))
    scales = [float(r) for r in cfg["scales"]]
    err_rows = []
    errs = []
    for r in scales:
        worst = 0.0
        for i in sample:
            v = estimate_differential(f, chart, int(i), r)
            worst = max(worst, float(np.linalg.norm(v - grad[i])))
        errs.append(worst)
        err_rows.append([r, worst])
    slope = _loglog_slope(scales, errs)
    cbound = max(e / r for e, r in zip(errs, scales))
    assertions.append(Assertion("error_halving_slope", bool(abs(slope - 1.0) <= 0.2),
                                f"slope {slope:.4f} (want 1 +- 0.2)"))
    assertions.append(Assertion("error_linear_bound", bool(cbound <= float(cfg["linear_bound"])),
                                f"max err/r {cbound:.4f} vs {cfg['linear_bound']}"))

    res_rows = []
    verdicts = 0
    r0 = scales[-1]
    check = sample[: int(cfg["residual_points"])]
    for i in check:
        v = estimate_differential(f, chart, int(i), r0)
        prof = residual_profile(f, chart, v, int(i), [4 * r0, 2 * r0, r0])
        verdicts += int(prof.verdict)
        res_rows.append([grid.point_ids[int(i)], prof.residuals[-1], prof.verdict])
    frac = verdicts / len(check)
    assertions.append(Assertion("residual_verdict_fraction", bool(frac >= 0.95),
                                f"fraction {frac:.3f}"))
    return [Table("differential_error", ["scale", "max_error"], err_rows),
            Table("residual_verdicts", ["point_id", "finest_residual", "verdict"], res_rows)], assertions


# ---------------------------------------------------------------------------
# E6: product-rule defect scaling
# ---------------------------------------------------------------------------

def _exp_leibniz(cfg):
    assertions = []
    rows = []
    exponents = [int(k) for k in cfg["step_exponents"]]
    pairs = [("x*x^2", 1, 2), ("x^2*x^3", 2, 3), ("x*x^3", 1, 3)]
    sups = {name: [] for name, *_ in pairs}
    hs = [2.0 ** (-k) for k in exponents]
    for h in hs:
        sp = generate_space(SpaceSpec("euclidean_grid", {"dim": 1, "step": h, "extent": [0.0, 1.0]}))
        x = sp.ambient_coords[:, 0]
        d = build_stencil(sp, "coordinate_axis", h, axis=0)
        for name, a, b in pairs:
            f = ScalarField(sp, x ** a)
            g = ScalarField(sp, x ** b)
            _, sup = leibniz_defect(d, f, g)
            sups[name].append(sup)
            rows.append([name, h, sup])
    for name, *_ in pairs:
        slope = _loglog_slope(hs, sups[name])
        assertions.append(Assertion(f"defect_slope_{name}",
                                    bool(0.85 <= slope <= 1.15),
                                    f"log-log slope {slope:.4f}"))
    return [Table("defect", ["pair", "step", "sup_defect"], rows)], assertions


# ---------------------------------------------------------------------------
# E7: upper-gradient solver vs reference
# ---------------------------------------------------------------------------

def _exp_hajlasz(cfg):
    assertions = []
    rows = []
    rng = np.random.default_rng(int(cfg["seed"]))
    n_instances = int(cfg["instances"])
    worst_inf = 0.0
    worst_p2 = 0.0
    for t in range(n_instances):
        n = 3 + t % 4
        coords = rng.random((n, 2))
        w = rng.uniform(0.5, 2.0, n)
        sp = FiniteMetricMeasureSpace([f"p{i}" for i in range(n)], w, ambient_coords=coords)
        u = ScalarField(sp, rng.standard_normal(n))
        res_inf = hajlasz_gradient(u, math.inf)
        _, v_inf = hajlasz_oracle_grid(u, math.inf)
        gap_inf = abs(res_inf.norm - v_inf)
        worst_inf = max(worst_inf, gap_inf)
        rows.append([t, n, "inf", res_inf.norm, v_inf, gap_inf])

        res2 = hajlasz_gradient(u, 2.0, max_iters=int(cfg["max_iters"]))
        _, v2 = hajlasz_oracle_grid(u, 2.0)
        gap2 = abs(res2.norm - v2)
        worst_p2 = max(worst_p2, gap2)
        rows.append([t, n, "2", res2.norm, v2, gap2])
    assertions.append(Assertion("p_inf_exact", bool(worst_inf == 0.0),
                                f"worst gap {worst_inf:.3e}"))
    assertions.append(Assertion("p2_within_tolerance", bool(worst_p2 <= 1e-6),
                                f"worst gap {worst_p2:.3e}"))
    return [Table("instances", ["instance", "n", "p", "solver_norm", "oracle_norm", "gap"], rows)], assertions


# ---------------------------------------------------------------------------
# registry and runner
# ---------------------------------------------------------------------------

@dataclass
class ExperimentDef:
    id: str
    title: str
    defaults: dict
    fn: object


REGISTRY = {
    "E1": ExperimentDef("E1", "doubling ratios across scales", {
        "segment_points": 201, "segment_radii": [1.0, 2.0, 4.0, 8.0],
        "cantor_depths": [6, 7], "cantor_radius_levels": 5,
    }, _exp_doubling),
    "E2": ExperimentDef("E2", "slope-ratio statistics, grid vs dust", {
        "grid_step": 0.02, "grid_extent": [1.0, 2.0], "cantor_depth": 6,
    }, _exp_liplip),
    "E3": ExperimentDef("E3", "rank vs scale and snowflake degeneration", {
        "grid_step": 0.02, "scale_multipliers": [1, 2, 4],
        "snowflake_step": 2.0 ** -10, "snowflake_exponents": [0.5, 0.7],
        "snowflake_scale_exponents": [4, 5, 6, 7, 8],
    }, _exp_rank),
    "E4": ExperimentDef("E4", "embedding distortion vs exponent", {
        "s_grid": [0.3, 0.5, 0.7],
    }, _exp_embedding),
    "E5": ExperimentDef("E5", "differentials vs analytic gradients", {
        "grid_step": 0.01, "sample_points": 200, "sample_seed": 0,
        "scales": [0.16, 0.08, 0.04, 0.02], "linear_bound": 2.0,
        "residual_points": 40,
    }, _exp_differential),
    "E6": ExperimentDef("E6", "product-rule defect scaling", {
        "step_exponents": [4, 5, 6, 7, 8, 9],
    }, _exp_leibniz),
    "E7": ExperimentDef("E7", "upper-gradient solver vs dense-grid reference", {
        "instances": 20, "seed": 20240701, "max_iters": 20000,
    }, _exp_hajlasz),
}


def list_experiments() -> list[tuple[str, str]]:
    return [(e.id, e.title) for e in REGISTRY.values()]


def run_experiment(exp_id: str, out_dir: str, overrides: dict | None = None,
                   seed: int | None = None, figures: bool = True) -> RunResult:
    """Execute one registered experiment into <out_dir>/<exp_id>/."""
    if exp_id not in REGISTRY:
        known = ", ".join(sorted(REGISTRY))
        raise KeyError(f"unknown experiment {exp_id!r}; registered: {known}")
    exp = REGISTRY[exp_id]
    cfg = dict(exp.defaults)
    cfg.update(overrides or {})
    if seed is not None and "seed" in cfg:
        cfg["seed"] = int(seed)

    run_dir = os.path.join(out_dir, exp_id)
    os.makedirs(run_dir, exist_ok=True)
    t0 = time.perf_counter()
    tables, assertions = exp.fn(cfg)
    wall = time.perf_counter() - t0

    table_paths = write_tables(tables, os.path.join(run_dir, "tables"))
    figure_paths = []
    if figures:
        figure_paths = render_figures(exp_id, tables, os.path.join(run_dir, "figures"))

    passed = all(a.passed for a in assertions)
    manifest = {
        "experiment": exp_id,
        "title": exp.title,
        "config": cfg,
        "version": __version__,
        "tables": [os.path.relpath(p, run_dir) for p in table_paths],
        "figures": [os.path.relpath(p, run_dir) for p in figure_paths],
        "assertions": [{"name": a.name, "passed": a.passed, "detail": a.detail}
                       for a in assertions],
        "passed": passed,
        "wall_clock_s": wall,
    }
    manifest_path = os.path.join(run_dir, "manifest.json")
    write_json(manifest_path, manifest)
    return RunResult(experiment=exp_id, run_dir=run_dir, manifest_path=manifest_path,
                     passed=passed, assertions=assertions)


def replay(manifest_path: str) -> ReplayResult:
    """Re-run a manifest into a scratch directory and byte-compare the tables."""
    manifest = read_json(manifest_path)
    exp_id = manifest["experiment"]
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    missing = [rel for rel in manifest["tables"]
               if not os.path.exists(os.path.join(base_dir, rel))]
    if missing:
        raise FileNotFoundError(f"manifest artifacts missing: {missing}")

    tmp = tempfile.mkdtemp(prefix="lipcalc-replay-")
    try:
        rerun = run_experiment(exp_id, tmp, overrides=manifest["config"], figures=False)
        compared, diffs = [], []
        for rel in manifest["tables"]:
            old = os.path.join(base_dir, rel)
            new = os.path.join(rerun.run_dir, rel)
            compared.append(rel)
            with open(old, "rb") as fa, open(new, "rb") as fb:
                if fa.read() != fb.read():
                    diffs.append(rel)
        return ReplayResult(identical=not diffs, compared=compared, diffs=diffs,
                            missing=[])
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
