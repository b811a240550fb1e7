"""Results tables, confusion heatmaps, shot curves and transfer/winner heatmaps."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalReport  # noqa: E402
from .transfer import TransferMatrix, WinnerMatrix  # noqa: E402

ROW_LABELS = {
    "zeroshot": "Handcrafted prompt",
    "coop": "CLIP+CoOp",
    "cocoop": "CLIP+CoCoOp",
    "maple": "CLIP+MaPLe",
    "promptsrc": "CLIP+PromptSRC",
    "probe": "linear probe CLIP",
}
_ROW_ORDER = list(ROW_LABELS)
_PNG_META = {"Software": None}


def _row_key(method: str, shots: int) -> tuple:
    rank = _ROW_ORDER.index(method) if method in _ROW_ORDER else len(_ROW_ORDER)
    return (rank, method, shots)


def _row_label(method: str, shots: int) -> str:
    label = ROW_LABELS.get(method, method)
    return label if method == "zeroshot" else f"{label}, shots={shots}"


def results_table(reports: Sequence[EvalReport]) -> tuple[list[str], list[list[str]]]:
    """Table with one row per (method, shots) and one column per dataset, in percent."""
    datasets = sorted({r.dataset for r in reports})
    cells: dict[tuple, dict[str, float]] = {}
    for r in reports:
        cells.setdefault((r.method, r.shots), {})[r.dataset] = 100 * r.accuracy
    header = ["method"] + datasets
    rows = []
    for method, shots in sorted(cells, key=lambda k: _row_key(*k)):
        vals = cells[(method, shots)]
        rows.append([_row_label(method, shots)] + [f"{vals[d]:.2f}" if d in vals else "NA" for d in datasets])
    return header, rows


def _heatmap(values, xlabels, ylabels, title, path, fmt="{:.2f}", annotations=None):
    n, m = values.shape
    fig, ax = plt.subplots(figsize=(max(4, 0.45 * m + 2), max(3, 0.45 * n + 1.5)))
    ax.imshow(np.nan_to_num(values, nan=0.0), cmap="Blues", vmin=0, vmax=max(1e-9, np.nanmax(values) if np.isfinite(values).any() else 1))
    ax.set_xticks(range(m), labels=xlabels, rotation=90, fontsize=7)
    ax.set_yticks(range(n), labels=ylabels, fontsize=7)
    if n * m <= 400:
        for i in range(n):
            for j in range(m):
                text = "NA" if np.isnan(values[i, j]) else fmt.format(values[i, j])
                if annotations is not None and annotations[i][j]:
                    text = f"{annotations[i][j]}\n{text}"
                ax.text(j, i, text, ha="center", va="center", fontsize=5)
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def emit_report(
    reports: Sequence[EvalReport],
    out_dir,
    transfers: Sequence[TransferMatrix] = (),
    winners: WinnerMatrix | None = None,
    summary: dict | None = None,
) -> list[Path]:
    """Write tables and figures under ``out_dir``; returns the written paths (sorted)."""
    if not reports:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    ordered = sorted(reports, key=lambda r: (r.dataset, *_row_key(r.method, r.shots)))

    p = out / "results.jsonl"
    with open(p, "w") as fh:
        for r in ordered:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    written.append(p)

    header, rows = results_table(ordered)
    p = out / "results_table.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    written.append(p)

    for dataset in sorted({r.dataset for r in ordered}):
        rs = [r for r in ordered if r.dataset == dataset]
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for method in sorted({r.method for r in rs}, key=lambda m: _row_key(m, 0)):
            pts = sorted((r.shots, 100 * r.accuracy) for r in rs if r.method == method)
            if method == "zeroshot":
                ax.axhline(pts[0][1], ls="--", color="gray", label=ROW_LABELS[method])
            else:
                ax.plot([s for s, _ in pts], [a for _, a in pts], marker="o", label=ROW_LABELS.get(method, method))
        ax.set_xscale("log", base=2)
        ax.set_xlabel("shots per class")
        ax.set_ylabel("top-1 accuracy (%)")
        ax.set_title(dataset)
        ax.legend(fontsize=6)
        fig.tight_layout()
        p = out / f"curve_{dataset}.png"
        fig.savefig(p, dpi=100, metadata=_PNG_META)
        plt.close(fig)
        written.append(p)

    for r in ordered:
        names = r.confusion.classnames or [str(i) for i in range(r.confusion.counts.shape[0])]
        p = out / f"confusion_{r.dataset}_{r.method}_{r.shots}.png"
        _heatmap(r.confusion.normalized, names, names, f"{r.dataset} {r.method} {r.shots}-shot", p)
        written.append(p)

    for t in transfers:
        p = out / f"transfer_{t.method}.png"
        _heatmap(100 * t.values, t.targets, t.sources, f"{t.method}: source (rows) -> target (cols)", p, "{:.1f}")
        written.append(p)
    if transfers:
        p = out / "transfer_matrices.json"
        p.write_text(json.dumps([t.to_dict() for t in transfers], indent=1, sort_keys=True))
        written.append(p)
    if winners is not None:
        p = out / "winner_matrix.png"
        _heatmap(100 * winners.values, winners.targets, winners.sources, "best method per transfer", p, "{:.1f}",
                 annotations=winners.winners.tolist())
        written.append(p)
        p = out / "winner_matrix.json"
        p.write_text(json.dumps(winners.to_dict(), indent=1, sort_keys=True))
        written.append(p)

    p = out / "summary.json"
    doc = {
        "cells": [{"dataset": r.dataset, "method": r.method, "shots": r.shots, "accuracy": r.accuracy, "seeds": r.seeds} for r in ordered],
        "provenance": [r.provenance for r in ordered],
    }
    doc.update(summary or {})
    p.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
    written.append(p)
    return sorted(written)
