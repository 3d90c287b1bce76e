"""Report files: CSV/JSON writers and the markdown summary table."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

from .harness import CSV_COLUMNS, MetricsReport


class InconsistentReports(ValueError):
    pass


def to_csv(reports: Iterable[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def to_json(reports: Iterable[MetricsReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=1, sort_keys=True) + "\n"


def load_reports(path) -> list[MetricsReport]:
    """Reports from a JSON file or every ``*.json`` file in a directory.

    Each file holds one report object or a list of them; files without the
    report fields (for example ``resolved_config.json``) are skipped.
    """
    path = Path(path)
    files = sorted(path.rglob("*.json")) if path.is_dir() else [path]
    out = []
    for f in files:
        doc = json.loads(f.read_text())
        items = doc if isinstance(doc, list) else [doc]
        for item in items:
            if isinstance(item, dict) and "per_class_iou" in item and "miou" in item:
                out.append(MetricsReport.from_json(item))
    return out


def row_label(r: MetricsReport) -> str:
    parts = [r.method]
    if "augmentation" in r.extra:
        parts.append(f"aug={r.extra['augmentation']}")
    if "batch_size" in r.extra:
        parts.append(f"bs={r.extra['batch_size']}")
    return " ".join(parts)


def column_label(r: MetricsReport) -> str:
    if "stream" in r.domain.params:
        return "mixed(" + r.domain.params["stream"] + ")"
    return f"{r.domain.label}-{r.domain.severity}" if r.domain.severity else r.domain.label


def markdown_table(reports: Sequence[MetricsReport], metric: str = "miou", digits: int = 1) -> str:
    """Method x domain table in percent with an ``Avg.`` column.

    The average is the arithmetic mean of the row's domain columns.  Duplicate
    (row, column) cells are averaged, which is how per-seed runs are merged.
    """
    if not reports:
        raise InconsistentReports("no reports")
    n_classes = {len(r.per_class_iou) for r in reports}
    if len(n_classes) != 1:
        raise InconsistentReports(f"reports disagree on the number of classes: {sorted(n_classes)}")
    rows, cols, cells = [], [], {}
    for r in reports:
        rl, cl = row_label(r), column_label(r)
        if rl not in rows:
            rows.append(rl)
        if cl not in cols:
            cols.append(cl)
        cells.setdefault((rl, cl), []).append(getattr(r, metric))
    fmt = f"{{:.{digits}f}}"
    lines = ["| Method | " + " | ".join(cols) + " | Avg. |",
             "|---|" + "---:|" * (len(cols) + 1)]
    for rl in rows:
        vals = []
        for cl in cols:
            v = cells.get((rl, cl))
            vals.append(None if v is None else 100.0 * sum(v) / len(v))
        present = [v for v in vals if v is not None]
        avg = sum(present) / len(present)
        text = ["-" if v is None else fmt.format(v) for v in vals]
        lines.append(f"| {rl} | " + " | ".join(text) + f" | {fmt.format(avg)} |")
    return "\n".join(lines) + "\n"
