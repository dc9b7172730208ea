"""Deterministic text and CSV rendering of evaluation and benchmark reports."""

from __future__ import annotations

import csv
import io

from .kinodyn import CHANNELS, EvalReport
from .navigate import RunReport

EVAL_COLUMNS = ["mode", "roll", "sliding", "bumpiness", "combined", "baseline_combined", "n_train", "n_test", "epochs_run"]
RUN_COLUMNS = [
    "method",
    "v_max",
    "top_speed",
    "avg_speed",
    "avg_speed_std",
    "avg_bumpiness",
    "avg_bumpiness_std",
    "max_sliding",
    "max_roll",
    "dnf_count",
]


def render_eval_table(reports: list[EvalReport]) -> str:
    """Ablation matrix: one column per mode, one row per prediction channel."""
    header = ["loss"] + [r.mode for r in reports]
    rows = []
    for ch in CHANNELS:
        rows.append([ch] + [f"{r.mse[ch]:.4f}" for r in reports])
    rows.append(["combined"] + [f"{r.combined:.4f}" for r in reports])
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def eval_reports_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EVAL_COLUMNS)
    w.writeheader()
    for r in reports:
        w.writerow(
            {
                "mode": r.mode,
                "roll": repr(r.mse["roll"]),
                "sliding": repr(r.mse["sliding"]),
                "bumpiness": repr(r.mse["bumpiness"]),
                "combined": repr(r.combined),
                "baseline_combined": repr(r.baseline_combined),
                "n_train": r.n_train,
                "n_test": r.n_test,
                "epochs_run": r.epochs_run,
            }
        )
    return buf.getvalue()


def parse_eval_csv(text: str) -> list[EvalReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(
            EvalReport(
                mode=row["mode"],
                mse={"roll": float(row["roll"]), "sliding": float(row["sliding"]), "bumpiness": float(row["bumpiness"])},
                combined=float(row["combined"]),
                baseline_combined=float(row["baseline_combined"]),
                n_train=int(row["n_train"]),
                n_test=int(row["n_test"]),
                epochs_run=int(row["epochs_run"]),
            )
        )
    return out


def _method_dicts(report) -> list[dict]:
    if isinstance(report, RunReport):
        return [m.to_dict() for m in report.methods]
    if isinstance(report, dict):
        return list(report.get("methods", []))
    return list(report)


def render_run_table(report) -> str:
    """Accepts a RunReport, its to_dict() form, or a list of method dicts."""
    header = ["method", "top speed", "avg speed", "avg bumpiness", "max sliding", "max roll", "laps", "dnf"]
    rows = []
    for m in _method_dicts(report):
        rows.append(
            [
                m["method"],
                f"{m['top_speed']:.2f}",
                f"{m['avg_speed']:.2f} ± {m['avg_speed_std']:.2f}",
                f"{m['avg_bumpiness']:.3f} ± {m['avg_bumpiness_std']:.3f}",
                f"{m['max_sliding']:.2f}",
                f"{m['max_roll']:.2f}",
                str(len(m["lap_times"])),
                str(m["dnf_count"]),
            ]
        )
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def run_report_csv(report) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RUN_COLUMNS)
    w.writeheader()
    for d in _method_dicts(report):
        w.writerow({k: (repr(d[k]) if isinstance(d[k], float) else d[k]) for k in RUN_COLUMNS})
    return buf.getvalue()


def parse_run_csv(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = dict(row)
        for k in RUN_COLUMNS:
            if k in ("method",):
                continue
            parsed[k] = float(row[k]) if k != "dnf_count" else int(row[k])
        out.append(parsed)
    return out
