"""Run-directory reporting: delimited tables plus rendered figures.

Tables are the artifact of record (byte-stable CSV, replay-compared);
figures are rendered alongside them for quick inspection and are not part
of the replay contract.
"""
from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import write_table

__all__ = ["Table", "write_tables", "render_figures"]


class Table:
    def __init__(self, name: str, header, rows):
        self.name = name
        self.header = list(header)
        self.rows = [list(r) for r in rows]

    def column(self, key, cast=float):
        j = self.header.index(key)
        return [cast(r[j]) for r in self.rows]


def write_tables(tables, directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for t in tables:
        path = os.path.join(directory, f"{t.name}.csv")
        write_table(path, t.header, t.rows)
        paths.append(path)
    return paths


def _finite(xs):
    return [x for x in xs if isinstance(x, (int, float)) and math.isfinite(x)]


def render_figures(experiment_id: str, tables, directory) -> list[str]:
    """One summary figure per experiment, built from its tables."""
    os.makedirs(directory, exist_ok=True)
    byname = {t.name: t for t in tables}
    renderer = _RENDERERS.get(experiment_id)
    if renderer is None:
        return []
    path = os.path.join(directory, f"{experiment_id}_summary.png")
    fig = plt.figure(figsize=(7.0, 4.5))
    try:
        renderer(fig, byname)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
    finally:
        plt.close(fig)
    return [path]


def _fig_doubling(fig, tables):
    ax = fig.add_subplot(111)
    t = tables["doubling"]
    spaces = sorted(set(t.column("space", str)))
    for sname in spaces:
        rs = [float(r[1]) for r in t.rows if r[0] == sname]
        ks = [float(r[2]) for r in t.rows if r[0] == sname]
        ax.plot(rs, ks, "o-", label=sname)
    ax.set_xscale("log")
    ax.set_xlabel("radius r")
    ax.set_ylabel("max ball-mass ratio at 2r vs r")
    ax.legend(fontsize=8)
    ax.set_title("doubling ratios by scale")


def _fig_liplip(fig, tables):
    ax = fig.add_subplot(111)
    for name, color in (("ratios_euclidean", "tab:blue"), ("ratios_cantor", "tab:red")):
        if name in tables:
            vals = _finite(tables[name].column("ratio"))
            if vals:
                ax.hist(vals, bins=40, alpha=0.55, label=name.split("_")[1], color=color)
    ax.set_xlabel("upper/lower slope ratio")
    ax.set_ylabel("points")
    ax.legend()
    ax.set_title("slope-ratio distributions")


def _fig_rank(fig, tables):
    ax = fig.add_subplot(121)
    t = tables["rank_vs_scale"]
    for sname in sorted(set(t.column("space", str))):
        hs = [float(r[1]) for r in t.rows if r[0] == sname]
        ratios = [float(r[3]) for r in t.rows if r[0] == sname]
        ax.loglog(hs, ratios, "o-", label=sname)
    ax.set_xlabel("scale h")
    ax.set_ylabel("dependence ratio sigma_(r+1)/sigma_1")
    ax.legend(fontsize=8)
    ax2 = fig.add_subplot(122)
    t2 = tables["degeneration"]
    for sname in sorted(set(t2.column("space", str))):
        hs = [float(r[1]) for r in t2.rows if r[0] == sname]
        vals = [float(r[2]) for r in t2.rows if r[0] == sname]
        ax2.loglog(hs, vals, "o-", label=sname)
    ax2.set_xlabel("scale h")
    ax2.set_ylabel("max |first difference of id|")
    ax2.legend(fontsize=8)


def _fig_embedding(fig, tables):
    ax = fig.add_subplot(111)
    t = tables["distortion"]
    for sname in sorted(set(t.column("space", str))):
        ss = [float(r[1]) for r in t.rows if r[0] == sname]
        ratios = [float(r[4]) for r in t.rows if r[0] == sname]
        ax.plot(ss, ratios, "o-", label=sname)
    ax.set_xlabel("snowflake exponent s")
    ax.set_ylabel("distortion ratio upper/lower")
    ax.legend(fontsize=8)
    ax.set_title("embedding distortion vs s")


def _fig_differential(fig, tables):
    ax = fig.add_subplot(111)
    t = tables["differential_error"]
    hs = t.column("scale")
    errs = t.column("max_error")
    ax.loglog(hs, errs, "o-", label="max |estimated - analytic|")
    ax.loglog(hs, [2 * h for h in hs], "--", label="2 r reference")
    ax.set_xlabel("estimation scale r")
    ax.set_ylabel("max differential error")
    ax.legend()


def _fig_leibniz(fig, tables):
    ax = fig.add_subplot(111)
    t = tables["defect"]
    for pair in sorted(set(t.column("pair", str))):
        hs = [float(r[1]) for r in t.rows if r[0] == pair]
        ds = [float(r[2]) for r in t.rows if r[0] == pair]
        ax.loglog(hs, ds, "o-", label=pair)
    ax.set_xlabel("grid step h")
    ax.set_ylabel("sup product-rule defect")
    ax.legend(fontsize=8)


def _fig_hajlasz(fig, tables):
    ax = fig.add_subplot(111)
    t = tables["instances"]
    gaps = [max(g, 1e-18) for g in t.column("gap")]
    ax.semilogy(range(len(gaps)), gaps, "o")
    ax.axhline(1e-6, color="tab:red", ls="--", label="tolerance")
    ax.set_xlabel("instance")
    ax.set_ylabel("|solver - oracle| objective gap")
    ax.legend()


_RENDERERS = {
    "E1": _fig_doubling,
    "E2": _fig_liplip,
    "E3": _fig_rank,
    "E4": _fig_embedding,
    "E5": _fig_differential,
    "E6": _fig_leibniz,
    "E7": _fig_hajlasz,
}
