#!/usr/bin/env python3
"""Plots for ionfv output directories.

    python3 scripts/plot.py out/equilibrium_1d            # writes PNGs next to the CSVs
    python3 scripts/plot.py out/ks_blowup_1 --show

Picks plots from whichever CSVs the directory holds.
"""

import argparse
import math
from pathlib import Path

import matplotlib

import pandas as pd


def save(fig, path, show):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    print(path)
    if not show:
        import matplotlib.pyplot as plt

        plt.close(fig)


def species_cols(df, prefix):
    return [c for c in df.columns if c.startswith(prefix)]


def plot_diagnostics(d, show):
    import matplotlib.pyplot as plt

    df = pd.read_csv(d / "diagnostics.csv")
    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    ax[0].plot(df["t"], df["E"])
    ax[0].set_xlabel("t")
    ax[0].set_ylabel("energy")
    for c in species_cols(df, "linf_"):
        ax[1].plot(df["t"], df[c], label=c)
    ax[1].set_xlabel("t")
    ax[1].set_ylabel("max concentration")
    ax[1].legend()
    save(fig, d / "diagnostics.png", show)


def plot_snapshot(path, show):
    import matplotlib.pyplot as plt

    df = pd.read_csv(path)
    cs = species_cols(df, "c_")
    if "y" not in df.columns:
        fig, ax = plt.subplots(figsize=(6, 4))
        for c in cs:
            ax.plot(df["x"], df[c], label=c)
        ax.set_xlabel("x")
        ax.legend()
    else:
        xs, ys = sorted(df["x"].unique()), sorted(df["y"].unique())
        fig, axes = plt.subplots(1, len(cs), figsize=(5 * len(cs), 4), squeeze=False)
        for ax, c in zip(axes[0], cs):
            grid = df.pivot(index="y", columns="x", values=c).values
            im = ax.imshow(grid, origin="lower", extent=(xs[0], xs[-1], ys[0], ys[-1]), cmap="viridis")
            ax.set_title(c)
            fig.colorbar(im, ax=ax)
    save(fig, path.with_suffix(".png"), show)


def plot_convergence(d, show):
    import matplotlib.pyplot as plt

    df = pd.read_csv(d / "convergence.csv")
    fig, ax = plt.subplots(figsize=(5, 4))
    for c in ["err_linf", "err_l1", "err_l2"]:
        ax.loglog(df["h"], df[c], "o-", label=c)
    h = df["h"].values
    for order, style in [(1, ":"), (2, "--")]:
        ref = df["err_l2"].iloc[-1] * (h / h[-1]) ** order
        ax.loglog(h, ref, "k" + style, label=f"slope {order}")
    ax.set_xlabel("h")
    ax.legend()
    save(fig, d / "convergence.png", show)


def plot_regularization(d, show):
    import matplotlib.pyplot as plt

    df = pd.read_csv(d / "regularization.csv")
    fig, ax = plt.subplots(figsize=(5, 4))
    for eps, g in df.groupby("eps"):
        ax.loglog(g["half_count"], g["discrepancy"], "o-", label=f"eps={eps:g}")
    ax.set_xlabel("N")
    ax.set_ylabel("max |c - c_eps|")
    ax.legend()
    save(fig, d / "regularization.png", show)


def plot_benchmark(d, show):
    import matplotlib.pyplot as plt

    df = pd.read_csv(d / "benchmark.csv")
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(df["nodes"], df["fast_s"], "o-", label="fast")
    direct = df.dropna(subset=["direct_s"])
    if len(direct):
        ax.loglog(direct["nodes"], direct["direct_s"], "s-", label="direct")
    n = df["nodes"].values
    ax.loglog(n, df["fast_s"].iloc[0] * n * [math.log(v) for v in n] / (n[0] * math.log(n[0])), "k--", label="n log n")
    ax.set_xlabel("nodes")
    ax.set_ylabel("seconds")
    ax.legend()
    save(fig, d / "benchmark.png", show)


def plot_sweep(d, show):
    import matplotlib.pyplot as plt

    df = pd.read_csv(d / "sweep.csv")
    fig, ax = plt.subplots(figsize=(5, 4))
    for c in species_cols(df, "linf_"):
        ax.plot(df["strength"], df[c], "o-", label=c)
    ax.set_xscale("symlog", linthresh=1e-2)
    ax.set_xlabel("strength")
    ax.set_ylabel("final max concentration")
    ax.legend()
    save(fig, d / "sweep.png", show)


def plot_peaks(d, show):
    import matplotlib.pyplot as plt

    df = pd.read_csv(d / "peaks.csv")
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(df["t"], df["separation"])
    ax.set_xlabel("t")
    ax.set_ylabel("peak separation")
    save(fig, d / "peaks.png", show)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("dir", type=Path)
    p.add_argument("--show", action="store_true", help="open windows instead of only writing PNGs")
    p.add_argument("--all-snapshots", action="store_true", help="plot every snapshot, not just first and last")
    args = p.parse_args()
    if not args.show:
        matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dirs = [args.dir] + sorted(q for q in args.dir.glob("run_*") if q.is_dir())
    for d in dirs:
        if (d / "diagnostics.csv").exists():
            plot_diagnostics(d, args.show)
        snaps = sorted(d.glob("snapshot_*.csv"))
        if not args.all_snapshots:
            snaps = snaps[:1] + snaps[-1:] if len(snaps) > 1 else snaps
        for s in snaps:
            plot_snapshot(s, args.show)
        for name, fn in [
            ("convergence.csv", plot_convergence),
            ("regularization.csv", plot_regularization),
            ("benchmark.csv", plot_benchmark),
            ("sweep.csv", plot_sweep),
            ("peaks.csv", plot_peaks),
        ]:
            if (d / name).exists():
                fn(d, args.show)
    if args.show:
        plt.show()


if __name__ == "__main__":
    main()
