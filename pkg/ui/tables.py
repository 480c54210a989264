"""This file contains the plain-text table builders used by the CLI.
It includes the per-head metrics table, the per-class recall table, the ablation table and the delimited dump."""

import csv
import math
import os
from typing import Dict, List, Optional, Sequence

from ui.ui_constants import Layout, Sizes


def format_table(headers: Sequence[str], rows: Sequence[Sequence], title: Optional[str] = None) -> str:
    """Left-aligned first column, right-aligned value columns"""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    pad = " " * Sizes.TABLE_PADDING

    def line(row):
        first = row[0].ljust(widths[0])
        rest = [cell.rjust(width) for cell, width in zip(row[1:], widths[1:])]
        return pad.join([first] + rest).rstrip()

    out = [title] if title else []
    out.append(line(cells[0]))
    out.append(pad.join("-" * w for w in widths))
    out.extend(line(row) for row in cells[1:])
    return "\n".join(out) + "\n"


def percent(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{100.0 * value:.{Sizes.METRIC_DECIMALS}f}"


def fraction(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.{Sizes.KAPPA_DECIMALS}f}"


def ordered_heads(results: Dict[str, object]) -> List[str]:
    return [head for head in Layout.HEAD_COLUMNS if head in results]


def head_metrics_table(results: Dict[str, Dict[str, float]], params: Optional[Dict[str, int]] = None,
                       latency_us: Optional[Dict[str, float]] = None, title: Optional[str] = None) -> str:
    """Heads as columns in S1, S2, Teacher order; OA/AA in percent, kappa as a fraction"""
    heads = ordered_heads(results)
    headers = ["Metric"] + [Layout.HEAD_TITLES[h] for h in heads]
    rows = [
        ["OA (%)"] + [percent(results[h]["oa"]) for h in heads],
        ["AA (%)"] + [percent(results[h]["aa"]) for h in heads],
        ["Kappa"] + [fraction(results[h]["kappa"]) for h in heads],
    ]
    if params:
        rows.append(["#P (M)"] + [f"{params[h] / 1e6:.3f}" if h in params else "-" for h in heads])
    if latency_us:
        rows.append(["Time (us)"] + [f"{latency_us[h]:.2f}" if h in latency_us else "-" for h in heads])
    return format_table(headers, rows, title)


def per_class_table(recalls: Dict[str, Sequence[float]], class_names: Optional[Sequence[str]] = None) -> str:
    heads = ordered_heads(recalls)
    count = len(recalls[heads[0]]) if heads else 0
    names = list(class_names) if class_names else [str(k + 1) for k in range(count)]
    headers = ["Class"] + [f"{Layout.HEAD_TITLES[h]} recall (%)" for h in heads]
    rows = [[names[k]] + [percent(float(recalls[h][k])) for h in heads] for k in range(count)]
    return format_table(headers, rows)


def ablation_rows(arms: Dict[str, Dict[str, Dict[str, float]]]) -> List[List[str]]:
    """One row per arm; the delta column compares teacher OA with the first arm"""
    rows = []
    baseline = None
    for arm, results in arms.items():
        row = [arm]
        for head in Layout.HEAD_COLUMNS:
            metrics = results.get(head)
            row += [percent(metrics["oa"]), percent(metrics["aa"]), fraction(metrics["kappa"])] if metrics else ["-"] * 3
        teacher_oa = results.get("teacher", {}).get("oa")
        if baseline is None:
            baseline = teacher_oa
            row.append("")
        elif teacher_oa is None or baseline is None:
            row.append("-")
        else:
            row.append(f"{100.0 * (teacher_oa - baseline):+.{Sizes.METRIC_DECIMALS}f}")
        rows.append(row)
    return rows


def ablation_headers() -> List[str]:
    headers = ["Arm"]
    for head in Layout.HEAD_COLUMNS:
        title = Layout.HEAD_TITLES[head]
        headers += [f"{title} OA", f"{title} AA", f"{title} k"]
    return headers + ["dT OA"]


def ablation_table(arms: Dict[str, Dict[str, Dict[str, float]]], title: Optional[str] = None) -> str:
    return format_table(ablation_headers(), ablation_rows(arms), title)


def write_delimited(path: str, headers: Sequence[str], rows: Sequence[Sequence], delimiter: str = "\t"):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter=delimiter, lineterminator="\n")
        writer.writerow(headers)
        writer.writerows(rows)
