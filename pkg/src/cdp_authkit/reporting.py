"""CSV tables and figures for an :class:`EvalReport`."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import CdpError
from .evaluation import METHODS, POOLED, EvalReport, write_csv

AUC_HEADER = ["defender", "fake_family", "method", "mean_auc", "std_auc", "n_seeds"]
SCORE_HEADER = ["seed", "defender", "id", "label", *METHODS]


def _fmt(x: float) -> str:
    return "nan" if x is None or not np.isfinite(x) else f"{x:.6f}"


def _families(report: EvalReport) -> list[str]:
    return report.families


def export_tables(report: EvalReport, out: Path) -> list[Path]:
    written = []
    rows = []
    per_seed = []
    for (d, fam, m) in sorted(report.aucs, key=lambda k: (k[0], k[1] == POOLED, k[1], METHODS.index(k[2]))):
        vals = np.asarray(report.aucs[(d, fam, m)], dtype=np.float64)
        rows.append([d, fam, m, _fmt(vals.mean()), _fmt(vals.std()), len(vals)])
        ok_seeds = [s for s in report.seeds if s not in report.failures]
        per_seed.extend([s, d, fam, m, _fmt(v)] for s, v in zip(ok_seeds, vals))
    p = out / "aucs.csv"
    write_csv(p, AUC_HEADER, rows)
    written.append(p)
    p = out / "aucs_per_seed.csv"
    write_csv(p, ["seed", "defender", "fake_family", "method", "auc"], per_seed)
    written.append(p)

    for fam in _families(report):
        fam_rows = [r for r in report.scores if r["family"] in ("original", fam)]
        p = out / f"scores_{fam}.csv"
        write_csv(p, SCORE_HEADER, [
            [r["seed"], r["defender"], r["id"], "original" if r["family"] == "original" else "fake",
             *[_fmt(r[m]) if m in r else "nan" for m in METHODS]]
            for r in fam_rows
        ])
        written.append(p)

    cal_rows = []
    ok_seeds = [s for s in report.seeds if s not in report.failures]
    for d in sorted(report.gammas):
        for k, s in enumerate(ok_seeds):
            cal_rows.append([s, d, _fmt(report.taus[d][k]), _fmt(report.retained[d][k]), _fmt(report.gammas[d][k]),
                             report.calibration_misses[d][k], _fmt(report.false_rejection[d][k]),
                             *[_fmt(report.fake_rejection[(d, f)][k]) for f in _families(report)]])
    p = out / "calibration.csv"
    write_csv(p, ["seed", "defender", "tau", "retained_fraction", "gamma", "calibration_misses",
                  "test_false_rejection", *[f"fake_rejection_{f}" for f in _families(report)]], cal_rows)
    written.append(p)
    return written


def export_data(report: EvalReport, out: Path) -> list[Path]:
    p = out / "report.json"
    p.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    arrays = {f"{d}/{k}": v for d, sample in report.samples.items() for k, v in sample.items()}
    q = out / "samples.npz"
    np.savez(q, **arrays)
    return [p, q]


def export_figures(report: EvalReport, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    defenders = report.defenders
    for fam in _families(report):
        fig, axes = plt.subplots(1, len(defenders), figsize=(4.5 * len(defenders), 3.2), squeeze=False)
        for ax, d in zip(axes[0], defenders):
            rows = [r for r in report.scores if r["defender"] == d]
            orig = [r["proposed_C"] for r in rows if r["family"] == "original"]
            fake = [r["proposed_C"] for r in rows if r["family"] == fam]
            bins = np.histogram_bin_edges(np.concatenate([orig, fake]) if orig or fake else [0, 1], bins=40)
            ax.hist(orig, bins=bins, alpha=0.6, color="tab:green", label="original")
            ax.hist(fake, bins=bins, alpha=0.6, color="tab:red", label=f"fake {fam}")
            ax.set_title(f"defender {d}")
            ax.set_xlabel("anomaly score")
            ax.legend(fontsize=7)
        fig.tight_layout()
        p = out / f"scores_{fam}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        written.append(p)

    for d, counts in sorted(report.weight_hist.items()):
        counts = np.asarray(counts)
        edges = np.linspace(0.0, 1.0, len(counts) + 1)
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="tab:blue")
        if report.taus.get(d) and np.isfinite(report.taus[d][0]):
            ax.axvline(report.taus[d][0], color="red", linestyle="--")
        ax.set_xlabel("1 - |t - m(t)|")
        ax.set_title(f"agreement weights, defender {d}")
        fig.tight_layout()
        p = out / f"weights_{d}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        written.append(p)

    for d, sample in sorted(report.samples.items()):
        probes = [k.split(":", 1)[1] for k in sample if k.startswith("probe:")]
        cols = ["template", "estimate", "confidence", "probe", "anomaly map"]
        fig, axes = plt.subplots(len(probes), 5, figsize=(9, 1.9 * len(probes)), squeeze=False)
        vmax = max(float(sample[f"map:{k}"].max()) for k in probes) or 1.0
        for r, k in enumerate(probes):
            imgs = [1.0 - sample["template"], sample["estimate"], sample["confidence"],
                    sample[f"probe:{k}"], sample[f"map:{k}"]]
            for c, img in enumerate(imgs):
                ax = axes[r, c]
                ax.imshow(img, cmap="gray", vmin=0.0, vmax=vmax if c == 4 else 1.0, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(cols[c], fontsize=8)
            axes[r, 0].set_ylabel(k, fontsize=7)
        fig.tight_layout()
        p = out / f"panel_{d}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        written.append(p)
    return written


def export_report(report: EvalReport, directory, figures: bool = True) -> list[Path]:
    """Write tables, raw report data and (optionally) figures into ``directory``."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = export_tables(report, out) + export_data(report, out)
        if figures:
            written += export_figures(report, out)
    except OSError as exc:
        raise CdpError(f"cannot write report to {out}: {exc}") from exc
    return written
