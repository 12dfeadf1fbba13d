"""Report serialization (JSON, CSV) and the plain-text results table."""

from __future__ import annotations

import csv
import io
import json
import statistics
from pathlib import Path

from .trainer import EvalReport

FIELDS = (
    "model", "ablation", "delay_ratio", "k", "mse", "mae", "r2", "params", "epochs",
    "seed", "mask_hash", "config_hash", "per_feature", "units", "wall_time",
)
_INT_FIELDS = {"k", "params", "epochs", "seed"}
_FLOAT_FIELDS = {"delay_ratio", "mse", "mae", "wall_time"}


class ReportFileError(OSError):
    pass


def sort_reports(reports):
    return sorted(reports, key=EvalReport.sort_key)


def to_json(reports, *, drop_wall_time=False) -> str:
    rows = []
    for r in sort_reports(reports):
        d = r.to_dict()
        if drop_wall_time:
            d.pop("wall_time")
        rows.append(d)
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"


def cell_filename(r: EvalReport) -> str:
    return f"{r.model}_{r.ablation}_d{r.delay_ratio:g}_k{r.k}_s{r.seed}.json"


def write_cell(r: EvalReport, directory) -> Path:
    path = Path(directory) / cell_filename(r)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(r.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_reports(directory) -> list[EvalReport]:
    """Every report found in the top-level ``*.json`` files of ``directory``.

    A file may hold one report object or an array of them; other JSON
    documents (manifests, stats) are skipped.
    """
    d = Path(directory)
    if not d.is_dir():
        raise ReportFileError(f"not a directory: {d}")
    out = []
    for path in sorted(d.glob("*.json")):
        try:
            doc = json.loads(path.read_text())
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ReportFileError(f"{path}: {exc}") from exc
        items = doc if isinstance(doc, list) else [doc]
        for item in items:
            if isinstance(item, dict) and "model" in item and "mse" in item:
                try:
                    out.append(EvalReport.from_dict(item))
                except (TypeError, ValueError) as exc:
                    raise ReportFileError(f"{path}: malformed report: {exc}") from exc
    return sort_reports(out)


def to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in sort_reports(reports):
        d = r.to_dict()
        row = []
        for f in FIELDS:
            v = d[f]
            if f == "per_feature":
                row.append(json.dumps(v, sort_keys=True))
            elif v is None:
                row.append("")
            elif isinstance(v, float):
                row.append(repr(v))
            else:
                row.append(v)
        w.writerow(row)
    return buf.getvalue()


def from_csv(text: str) -> list[EvalReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        d = {}
        for f, v in row.items():
            if f == "per_feature":
                d[f] = json.loads(v)
            elif f == "r2":
                d[f] = None if v == "" else float(v)
            elif f in _INT_FIELDS:
                d[f] = int(v)
            elif f in _FLOAT_FIELDS:
                d[f] = float(v)
            else:
                d[f] = v
        out.append(EvalReport.from_dict(d))
    return out


# ---------------------------------------------------------------------------
# Table
# ---------------------------------------------------------------------------

_METRICS = (("MSE", "mse"), ("MAE", "mae"), ("R2", "r2"), ("Params", "params"))
_BOLD, _RESET = "\x1b[1m", "\x1b[0m"


def _label(r: EvalReport) -> str:
    return r.model if r.ablation in ("full", "none") else r.ablation


def _cell(values, metric):
    values = [v for v in values if v is not None]
    if not values:
        return "-"
    if metric == "params":
        return str(values[0])
    mean = statistics.fmean(values)
    if len(values) == 1:
        return f"{mean:.5f}"
    return f"{mean:.5f}±{statistics.stdev(values):.5f}"


def render_table(reports, color=False) -> str:
    """Models x metrics down the side, delay ratio x horizon across the top.

    With several seeds per cell the entry is ``mean±std``. ``color`` bolds the
    lowest mean MSE in each column.
    """
    reports = sort_reports(reports)
    if not reports:
        return "(no reports)\n"
    cols = sorted({(r.delay_ratio, r.k) for r in reports})
    models = []
    for r in reports:
        if _label(r) not in models:
            models.append(_label(r))
    groups = {}
    for r in reports:
        groups.setdefault((_label(r), r.delay_ratio, r.k), []).append(r)

    best = {}
    for c in cols:
        means = {m: statistics.fmean(x.mse for x in groups[(m, *c)]) for m in models if (m, *c) in groups}
        if means:
            best[c] = min(means, key=means.get)

    header = ["model", "metric"] + [f"{ratio:.0%} k={k}" for ratio, k in cols]
    rows = []
    for m in models:
        for title, key in _METRICS:
            row = [m if title == "MSE" else "", title]
            for c in cols:
                cell = groups.get((m, *c))
                row.append("-" if cell is None else _cell([getattr(x, key) for x in cell], key))
            rows.append((m, key, row))

    widths = [max(len(header[i]), *(len(r[2][i]) for r in rows)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for m, key, row in rows:
        parts = []
        for i, (text, w) in enumerate(zip(row, widths)):
            padded = text.ljust(w) if i < 2 else text.rjust(w)
            if color and key == "mse" and i >= 2 and best.get(cols[i - 2]) == m:
                padded = f"{_BOLD}{padded}{_RESET}"
            parts.append(padded)
        lines.append("  ".join(parts).rstrip())
    return "\n".join(lines) + "\n"
