"""PNG figures rendered next to the CSV reports.

Headless (Agg backend).  Each function takes the rows a pipeline stage
returned and writes one file; nothing here feeds back into the numbers.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or software tag, so reruns write identical files
_PNG_META = {"Software": None}

plt.rcParams.update({
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def _grid(values: np.ndarray) -> np.ndarray:
    side = math.ceil(math.sqrt(values.size))
    g = np.full(side * side, np.nan)
    g[: values.size] = values
    return g.reshape(side, side)


def activation_heatmaps(clean: np.ndarray, trojan: np.ndarray, path, marks=()) -> None:
    """Mean perturbation-layer activation, clean next to Trojan, on a shared colour scale."""
    lim = float(np.nanmax(np.abs(np.concatenate([clean, trojan])))) or 1.0
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.2))
    for ax, vals, title in ((axes[0], clean, "clean"), (axes[1], trojan, "trojan")):
        im = ax.imshow(_grid(vals), cmap="coolwarm", vmin=-lim, vmax=lim)
        side = math.ceil(math.sqrt(vals.size))
        for u in marks:
            ax.add_patch(plt.Rectangle((u % side - 0.5, u // side - 0.5), 1, 1, fill=False, lw=1.5))
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.grid(False)
    fig.colorbar(im, ax=axes, shrink=0.8, label="mean activation")
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def alpha_e_grid(rows: list[dict], path) -> None:
    alphas = sorted({r["alpha"] for r in rows})
    iters = sorted({r["E"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    for ax, key in ((axes[0], "act_vision"), (axes[1], "act_text")):
        m = np.array([[next(r[key] for r in rows if r["alpha"] == a and r["E"] == e) for e in iters]
                      for a in alphas])
        im = ax.imshow(m, cmap="viridis", aspect="auto")
        for i in range(len(alphas)):
            for j in range(len(iters)):
                ax.text(j, i, f"{m[i, j]:.1f}", ha="center", va="center", color="w", fontsize=8)
        ax.set_xticks(range(len(iters)), [str(e) for e in iters])
        ax.set_yticks(range(len(alphas)), [str(a) for a in alphas])
        ax.set_xlabel("E")
        ax.set_ylabel(r"$\alpha$")
        ax.set_title(key.replace("act_", "") + " neuron")
        ax.grid(False)
        fig.colorbar(im, ax=ax, shrink=0.8)
    _save(fig, path)


def depth_bars(summary: list[dict], path) -> None:
    depths = sorted({r["depth"] for r in summary})
    fig, ax = plt.subplots(figsize=(4.5, 3))
    width = 0.38
    for k, (mode, label) in enumerate((("adversarial_loss", "with AL"), ("clean", "without AL"))):
        vals = [next((r["ata"]["mean"] for r in summary if r["depth"] == d and r["mode"] == mode), np.nan)
                for d in depths]
        errs = [next((r["ata"]["std"] for r in summary if r["depth"] == d and r["mode"] == mode), 0.0)
                for d in depths]
        ax.bar(np.arange(len(depths)) + (k - 0.5) * width, vals, width, yerr=errs, label=label, capsize=2)
    ax.set_xticks(range(len(depths)), [str(d) for d in depths])
    ax.set_xlabel("fine-tuned layers m")
    ax.set_ylabel("ATA (%)")
    ax.legend(frameon=False)
    _save(fig, path)


def sample_efficiency_lines(summary: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for d in sorted({r["depth"] for r in summary}):
        rs = sorted((r for r in summary if r["depth"] == d), key=lambda r: r["count"])
        xs = [max(r["count"], 0.5) for r in rs]
        ax.errorbar(xs, [r["ata"]["mean"] for r in rs], yerr=[r["ata"]["std"] for r in rs],
                    marker="o", ms=3, capsize=2, label=f"m={d}")
    ax.set_xscale("log")
    ax.set_xlabel("injected Trojans (0 plotted at 0.5)")
    ax.set_ylabel("ATA (%)")
    ax.legend(frameon=False)
    _save(fig, path)


def dp_tradeoff(summary: list[dict], path) -> None:
    rs = sorted(summary, key=lambda r: r["sigma"])
    xs = np.arange(len(rs))
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for key, label in (("mta", "MTA"), ("ata", "ATA")):
        ax.errorbar(xs, [r[key]["mean"] for r in rs], yerr=[r[key]["std"] for r in rs], marker="o",
                    ms=3, capsize=2, label=label)
    ax.set_xticks(xs, [f"{r['sigma']:g}" for r in rs])
    ax.set_xlabel(r"noise $\sigma$")
    ax.set_ylabel("accuracy (%)")
    ax.legend(frameon=False)
    _save(fig, path)


def nde_norms(benign: list[float], malicious: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(3.5, 3))
    ax.boxplot([benign, malicious])
    ax.set_xticks([1, 2], ["benign", "malicious"])
    ax.set_ylabel("L2 norm of head update")
    _save(fig, path)


def distribution_scatter(rows: list[tuple], path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.2))
    for ax, modality in zip(axes, ("vision", "text")):
        for kind, marker in (("clean", "o"), ("trojan", "x")):
            pts = np.array([(r[3], r[4]) for r in rows if r[0] == modality and r[1] == kind])
            if len(pts):
                ax.scatter(pts[:, 0], pts[:, 1], s=6, marker=marker, alpha=0.6, label=kind)
        ax.set_title(modality)
        ax.set_xlabel("PC1")
        ax.set_ylabel("PC2")
    axes[0].legend(frameon=False)
    _save(fig, path)


# --- stage hooks ------------------------------------------------------------


def _read_csv(path) -> list[dict]:
    import csv

    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _profile(path) -> np.ndarray:
    return np.array([float(r["mean_activation"]) for r in _read_csv(path)])


def render_stage(run_dir, stage: str) -> list:
    """Draw the figures for ``stage`` from the reports already in ``run_dir``."""
    import json
    from pathlib import Path

    d = Path(run_dir)
    out = []
    if stage == "gen-trojans":
        marks = ()
        if (d / "neurons.json").exists():
            nj = json.loads((d / "neurons.json").read_text())
            marks = (nj["u_text"], nj["u_vision"])
        activation_heatmaps(_profile(d / "activation_profile_clean.csv"),
                            _profile(d / "activation_profile_trojan.csv"), d / "activation_profiles.png", marks)
        out.append(d / "activation_profiles.png")
    elif stage == "sweep-alpha-e":
        rows = [{k: float(v) for k, v in r.items()} for r in _read_csv(d / "sweep_alpha_e.csv")]
        alpha_e_grid(rows, d / "sweep_alpha_e.png")
        out.append(d / "sweep_alpha_e.png")
    elif stage == "depth-sweep":
        depth_bars(json.loads((d / "depth_sweep.json").read_text())["rows"], d / "depth_sweep.png")
        out.append(d / "depth_sweep.png")
    elif stage == "sample-efficiency":
        sample_efficiency_lines(json.loads((d / "sample_efficiency.json").read_text())["rows"],
                                d / "sample_efficiency.png")
        out.append(d / "sample_efficiency.png")
    elif stage == "defend-dp":
        dp_tradeoff(json.loads((d / "defend_dp.json").read_text())["rows"], d / "defend_dp.png")
        out.append(d / "defend_dp.png")
    elif stage == "defend-nde":
        s = json.loads((d / "defend_nde.json").read_text())
        nde_norms(s["benign_norms"], s["malicious_norms"], d / "defend_nde.png")
        out.append(d / "defend_nde.png")
    elif stage == "export-dist":
        rows = [(r["modality"], r["kind"], r["task"], float(r["pc1"]), float(r["pc2"]))
                for r in _read_csv(d / "export_dist.csv")]
        distribution_scatter(rows, d / "export_dist.png")
        out.append(d / "export_dist.png")
    return out
