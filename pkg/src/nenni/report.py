"""Report writers: JSON and CSV artifacts, with matplotlib figures rendered
to files alongside the delimited output whenever the corresponding data is
present (ratio sweeps, epsilon sweeps, cost breakdowns).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def write_metrics_csv(report: dict, path) -> None:
    rows = [
        ("clean_accuracy", report.get("clean_accuracy")),
        ("entropy_mean", report.get("entropy_mean")),
        ("bitops_total", report.get("cost", {}).get("grand_total")),
        ("bitops_reduction", report.get("cost", {}).get("reduction_vs_baseline")),
    ]
    for label, value in report.get("robust_accuracy", {}).items():
        rows.append((f"robust_accuracy_{label}", value))
    for lid, frac in report.get("injection_fraction_per_layer", {}).items():
        rows.append((f"injection_fraction_{lid}", frac))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in rows:
            if value is not None:
                writer.writerow([name, f"{value:.6f}"])


def write_attacks_csv(attacks: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "kind", "epsilon", "steps", "robust_accuracy", "per_seed"])
        for row in attacks:
            writer.writerow(
                [
                    row["label"],
                    row["kind"],
                    f"{row['epsilon']:.6f}",
                    row["steps"],
                    f"{row['robust_accuracy']:.6f}",
                    ";".join(f"{v:.6f}" for v in row["per_seed"]),
                ]
            )


def write_ratio_sweep(rows: list[dict], out_dir) -> None:
    """rows: ratio / clean / robust / bitops_total / reduction."""
    out = Path(out_dir)
    with open(out / "ratio_sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "clean_accuracy", "robust_accuracy", "bitops_total", "reduction"])
        for r in rows:
            writer.writerow(
                [
                    f"{r['ratio']:.4f}",
                    f"{r['clean']:.6f}",
                    f"{r['robust']:.6f}",
                    f"{r['bitops_total']:.6e}",
                    f"{r['reduction']:.6f}",
                ]
            )
    ratios = [r["ratio"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(ratios, [r["clean"] for r in rows], "o-", label="clean")
    ax1.plot(ratios, [r["robust"] for r in rows], "s-", label="robust")
    ax1.set_xlabel("injection ratio")
    ax1.set_ylabel("accuracy")
    ax1.set_ylim(0, 1)
    ax1.legend()
    ax2.plot(ratios, [r["reduction"] * 100 for r in rows], "d-", color="tab:green")
    ax2.set_xlabel("injection ratio")
    ax2.set_ylabel("BitOps reduction (%)")
    fig.tight_layout()
    fig.savefig(out / "ratio_sweep.png", dpi=150)
    plt.close(fig)


def write_epsilon_sweep(rows: list[dict], out_dir) -> None:
    """rows: epsilon / baseline_robust / method_robust."""
    out = Path(out_dir)
    with open(out / "epsilon_sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epsilon", "epsilon_255", "baseline_robust", "method_robust", "gap"])
        for r in rows:
            writer.writerow(
                [
                    f"{r['epsilon']:.6f}",
                    f"{r['epsilon'] * 255:.1f}",
                    f"{r['baseline_robust']:.6f}",
                    f"{r['method_robust']:.6f}",
                    f"{r['method_robust'] - r['baseline_robust']:.6f}",
                ]
            )
    eps255 = [r["epsilon"] * 255 for r in rows]
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.plot(eps255, [r["baseline_robust"] for r in rows], "o-", label="baseline")
    ax.plot(eps255, [r["method_robust"] for r in rows], "s-", label="injected")
    ax.set_xlabel(r"perturbation budget $\epsilon \times 255$")
    ax.set_ylabel("robust accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "epsilon_sweep.png", dpi=150)
    plt.close(fig)


def write_cost_outputs(cost_rows, out_dir, stem: str = "cost") -> None:
    """cost_rows: (label, injected_fraction, CostReport) triples."""
    from .costmodel import write_cost_csv, write_cost_json

    out = Path(out_dir)
    write_cost_csv(cost_rows, out / f"{stem}.csv")
    write_cost_json(cost_rows, out / f"{stem}.json")
    labels = [label for label, _, _ in cost_rows]
    precise = [rep.precise_total for _, _, rep in cost_rows]
    approx = [rep.approx_total for _, _, rep in cost_rows]
    projection = [rep.projection_total for _, _, rep in cost_rows]
    xs = range(len(labels))
    fig, ax = plt.subplots(figsize=(max(4.5, 0.9 * len(labels)), 3.4))
    ax.bar(xs, precise, label="precise")
    ax.bar(xs, approx, bottom=precise, label="approx")
    bottom2 = [p + a for p, a in zip(precise, approx)]
    ax.bar(xs, projection, bottom=bottom2, label="projection")
    for x, (_, _, rep) in zip(xs, cost_rows):
        ax.text(
            x,
            rep.grand_total,
            f"{rep.reduction * 100:.1f}%",
            ha="center",
            va="bottom",
            fontsize=8,
        )
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("BitOps")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / f"{stem}_breakdown.png", dpi=150)
    plt.close(fig)


def write_jll_outputs(rows: list[dict], out_dir) -> None:
    """rows: k / norm_ok_fraction / ip_violation_fraction / ip_mean_abs_rel_err."""
    out = Path(out_dir)
    with open(out / "jll_check.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "norm_ok_fraction", "ip_violation_fraction", "ip_mean_abs_rel_err"])
        for r in rows:
            writer.writerow(
                [
                    r["k"],
                    f"{r['norm_ok_fraction']:.6f}",
                    f"{r['ip_violation_fraction']:.6f}",
                    f"{r['ip_mean_abs_rel_err']:.6f}",
                ]
            )
    ks = [r["k"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.plot(ks, [r["norm_ok_fraction"] for r in rows], "o-", label="norm preserved")
    ax.plot(ks, [1 - r["ip_violation_fraction"] for r in rows], "s-", label="inner product ok")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("projected dimension k")
    ax.set_ylabel("fraction within bound")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "jll_check.png", dpi=150)
    plt.close(fig)


def write_report_bundle(
    report: dict, out_dir, ratio_rows=None, epsilon_rows=None, cost_rows=None
) -> None:
    """The report path: JSON + CSVs, figures rendered alongside."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "report.json")
    method = report.get("method", report)
    write_metrics_csv(method, out / "metrics.csv")
    if "attacks" in method:
        write_attacks_csv(method["attacks"], out / "attacks.csv")
    if ratio_rows:
        write_ratio_sweep(ratio_rows, out)
    if epsilon_rows:
        write_epsilon_sweep(epsilon_rows, out)
    if cost_rows:
        write_cost_outputs(cost_rows, out)
