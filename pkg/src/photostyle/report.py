"""Rendering evaluation results: a percentage table, a lossless structured
dump, flat bar-plot series, and PNG figures (per-class bars and the confusion
heatmap). Metric values are fractions in [0, 1] everywhere in memory and only
become "71.82"-style percentages at the text layer.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from photostyle.evaluation import EvalReport, PredictionRecord, save_predictions

UNDEFINED = "n/a"


def format_percent(value: float | None) -> str:
    """0.7182 -> '71.82'; None (undefined metric) -> 'n/a'."""
    if value is None:
        return UNDEFINED
    return f"{value * 100:.2f}"


def render_text(report: EvalReport) -> str:
    """Fixed-width class × metric table with aggregate lines underneath."""
    name_width = max(len("class"), *(len(name) for name in report.class_names))
    header = f"{'class':<{name_width}}  {'AP':>7}  {'PCP':>7}  {'support':>7}"
    lines = [header, "-" * len(header)]
    for name, ap, pcp, support in zip(
        report.class_names, report.ap, report.pcp, report.support, strict=True
    ):
        lines.append(
            f"{name:<{name_width}}  {format_percent(ap):>7}  "
            f"{format_percent(pcp):>7}  {support:>7d}"
        )
    lines.append("-" * len(header))
    lines.append(f"MAP:      {format_percent(report.map)}")
    lines.append(f"mean PCP: {format_percent(report.mean_pcp)}")
    lines.append(f"samples:  {report.sample_count}")
    return "\n".join(lines) + "\n"


def render_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2)


def parse_json(text: str) -> EvalReport:
    return EvalReport.from_dict(json.loads(text))


def bar_series(report: EvalReport) -> dict:
    """Flat per-class series for external plotting; undefined entries are None."""
    return {
        "labels": list(report.class_names),
        "ap": list(report.ap),
        "pcp": list(report.pcp),
    }


def prediction_lines(probabilities, class_names) -> list[str]:
    """'<class>: <probability>' lines in descending probability order,
    original class order breaking ties."""
    probs = [float(p) for p in probabilities]
    if len(probs) != len(class_names):
        raise ValueError(f"{len(probs)} probabilities for {len(class_names)} classes")
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    return [f"{class_names[i]}: {probs[i]:.9f}" for i in order]


def save_figures(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Render ap_per_class.png (AP/PCP bars, ×100) and confusion_matrix.png
    (row-normalized heatmap) into out_dir."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = len(report.class_names)
    positions = np.arange(k)

    fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * k), 4.5))
    ap_vals = [0.0 if v is None else v * 100 for v in report.ap]
    pcp_vals = [0.0 if v is None else v * 100 for v in report.pcp]
    ax.bar(positions - 0.2, ap_vals, width=0.4, label="AP")
    ax.bar(positions + 0.2, pcp_vals, width=0.4, label="PCP")
    ax.set_xticks(positions)
    ax.set_xticklabels(report.class_names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 100)
    ax.legend()
    ax.set_title(f"per-class precision (MAP {format_percent(report.map)})")
    fig.tight_layout()
    ap_path = out_dir / "ap_per_class.png"
    fig.savefig(ap_path, dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(max(5.0, 0.5 * k), max(4.5, 0.45 * k)))
    matrix = np.asarray(report.confusion, dtype=np.float64)
    image = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(positions)
    ax.set_yticks(positions)
    ax.set_xticklabels(report.class_names, rotation=45, ha="right", fontsize=8)
    ax.set_yticklabels(report.class_names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("real")
    fig.colorbar(image, ax=ax, fraction=0.046)
    ax.set_title("row-normalized confusion")
    fig.tight_layout()
    cm_path = out_dir / "confusion_matrix.png"
    fig.savefig(cm_path, dpi=120)
    plt.close(fig)

    return [ap_path, cm_path]


def write_report_files(
    report: EvalReport,
    out_dir: str | Path,
    predictions: list[PredictionRecord] | None = None,
    figures: bool = True,
) -> list[Path]:
    """report.txt + report.json (+ predictions.jsonl, + figures) in out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    text_path = out_dir / "report.txt"
    text_path.write_text(render_text(report), encoding="utf-8")
    written.append(text_path)
    json_path = out_dir / "report.json"
    json_path.write_text(render_json(report) + "\n", encoding="utf-8")
    written.append(json_path)
    if predictions is not None:
        pred_path = out_dir / "predictions.jsonl"
        save_predictions(pred_path, predictions)
        written.append(pred_path)
    if figures:
        written.extend(save_figures(report, out_dir))
    return written
