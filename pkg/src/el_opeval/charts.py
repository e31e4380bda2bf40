"""Plain SVG charts of posteriors and study reports (matplotlib, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata and hash salt keep the SVG bytes reproducible
_SVG_META = {"Date": None, "Creator": None}
plt.rcParams["svg.hashsalt"] = "el_opeval"


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def posterior_chart(post, path, intervals=()) -> Path:
    """Density of a one-dimensional posterior, or of the second-minus-first marginal gap in 2-D."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if post.ndim == 1:
        x = post.axes[0]
        width = post.widths[0] or 1.0
        ax.step(x, post.cell_mass / width, where="mid", color="k", lw=1)
        for lo, hi, label in intervals:
            ax.axvspan(lo, hi, alpha=0.15, label=label)
        ax.set_xlabel("difference" if post.mode == "diff" else "policy value")
        ax.set_ylabel("posterior density")
        if intervals:
            ax.legend(frameon=False)
    else:
        mass = post.cell_mass.reshape(post.shape)
        ax.contourf(post.axes[0], post.axes[1], mass.T, levels=12, cmap="Greys")
        ax.set_xlabel("policy 1 value")
        ax.set_ylabel("policy 2 value")
    return _save(fig, Path(path))


def coverage_chart(rows, path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    for method, style in (("hpd", "-"), ("wilks", "--")):
        for level in sorted({r["level"] for r in rows}):
            sel = sorted((r for r in rows if r["method"] == method and r["level"] == level), key=lambda r: r["n"])
            if not sel:
                continue
            n = [r["n"] for r in sel]
            ax1.plot(n, [r["coverage"] for r in sel], style, marker="o", label=f"{method} {level:.0%}")
            ax2.plot(n, [r["mean_width"] for r in sel], style, marker="o", label=f"{method} {level:.0%}")
    for level in sorted({r["level"] for r in rows}):
        ax1.axhline(level, color="grey", lw=0.5)
    for ax, label in ((ax1, "coverage"), (ax2, "mean width")):
        ax.set_xscale("log", base=2)
        ax.set_xlabel("sample size")
        ax.set_ylabel(label)
    ax1.legend(frameon=False, fontsize=8)
    return _save(fig, Path(path))


def comparison_chart(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for n in sorted({r["n"] for r in rows}):
        for mode in ("absolute", "relative", "diff"):
            sel = sorted((r for r in rows if r["n"] == n and r["mode"] == mode), key=lambda r: r["margin"])
            if not sel:
                continue
            m = np.array([r["margin"] for r in sel])
            ax.plot(m, [r["mean"] for r in sel], marker="o", label=f"{mode}, n={n}")
            ax.fill_between(m, [r["band_lo"] for r in sel], [r["band_hi"] for r in sel], alpha=0.15)
    ax.set_xlabel("margin")
    ax.set_ylabel("P(improvement)")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, Path(path))


def render(result, outdir, alphas=()) -> dict[str, Path]:
    """Charts matching the result type; returns the written paths by name."""
    from .cli_io import CompareResult, EvalResult, level_key
    from .experiments import ComparisonReport, CoverageReport

    outdir = Path(outdir)
    if isinstance(result, EvalResult):
        ivs = [(result.hpd[a].lo, result.hpd[a].hi, f"HPD {level_key(a)}%") for a in sorted(result.hpd, reverse=True)]
        return {"posterior_chart": posterior_chart(result.posterior, outdir / "posterior.svg", ivs)}
    if isinstance(result, CompareResult):
        return {"posterior_chart": posterior_chart(result.posterior, outdir / "posterior.svg")}
    if isinstance(result, CoverageReport):
        return {"coverage_chart": coverage_chart(result.rows, outdir / "coverage.svg")}
    if isinstance(result, ComparisonReport):
        return {"comparison_chart": comparison_chart(result.rows, outdir / "comparison.svg")}
    return {}
