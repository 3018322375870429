"""Report rows, CSV/JSON writers and the plain-text summary."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

COLUMNS = ("benchmark", "path_class", "n_ranks", "size_bytes", "metric", "value",
           "model_value", "paper_ref", "deviation_pct")


def deviation_pct(measured: float, reference: float | None) -> float | None:
    if reference is None or reference == 0 or measured is None or math.isnan(measured):
        return None
    return (measured - reference) / reference * 100.0


@dataclass
class ReportRow:
    benchmark: str
    path_class: str
    n_ranks: int
    size_bytes: int
    metric: str
    value: float
    model_value: float | None = None
    paper_ref: str = ""
    deviation_pct: float | None = None

    def cells(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in COLUMNS]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}".rstrip("0").rstrip(".") if v == v else "nan"
    return str(v)


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def from_csv(text: str) -> list[ReportRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        def num(key):
            v = rec.get(key, "")
            return float(v) if v not in ("", None) else None
        rows.append(ReportRow(rec["benchmark"], rec["path_class"], int(rec["n_ranks"]),
                              int(rec["size_bytes"]), rec["metric"], num("value"),
                              num("model_value"), rec.get("paper_ref", ""), num("deviation_pct")))
    return rows


def to_json(rows, metadata: dict | None = None) -> str:
    doc = {"columns": list(COLUMNS), "rows": [asdict(r) for r in rows]}
    if metadata is not None:
        doc["metadata"] = metadata
    return json.dumps(doc, sort_keys=True, indent=1, default=str) + "\n"


def summary(rows, flag_pct: float | None = None) -> str:
    """Fixed-width text table; rows with |deviation| above ``flag_pct`` get FLAG."""
    lines = []
    for r in rows:
        dev = "" if r.deviation_pct is None else f"{r.deviation_pct:+.1f}%"
        flag = ""
        if flag_pct is not None and r.deviation_pct is not None and abs(r.deviation_pct) > flag_pct:
            flag = "  FLAG"
        model = "" if r.model_value is None else f"{r.model_value:.4g}"
        lines.append(f"{r.benchmark:<16}{r.path_class:<20}{r.n_ranks:>5}{r.size_bytes:>9} "
                     f"{r.metric:<16}{_fmt(r.value):>12} {model:>10} {dev:>8}{flag}")
    return "\n".join(lines) + "\n"
