"""Join results with the reference table and the analytic path model."""
from __future__ import annotations

from ..latmodel import DEFAULT_PARAMS, CalibrationParams, path_latency
from ..topology import PathClass
from .reference import MODEL_VALUES, REFERENCES
from .report import ReportRow, deviation_pct

FLAG_PCT = 10.0

# hop counts (intra-QFDB, intra-mezz, inter-mezz) of each reference path class
PATH_CLASSES = {
    "Intra-FPGA": PathClass(),
    "Intra-QFDB-sh": PathClass(1, 0, 0),
    "Intra-mezz-sh": PathClass(0, 1, 0),
    "Intra-mezz-mh(2)": PathClass(1, 1, 0),
    "Intra-mezz-mh(3)": PathClass(2, 1, 0),
    "Inter-mezz(3,1,2)": PathClass(2, 1, 3),
}


def _r(x):
    return None if x is None else round(x, 3)


def model_rows(params: CalibrationParams = DEFAULT_PARAMS) -> list[ReportRow]:
    """Reference latencies against the composition model.

    ``paper_vs_model``: how far the hardware measurement sits from the model.
    ``model_vs_paper``: how far the model sits from the measurement.
    """
    rows = []
    for rid, ref in REFERENCES.items():
        if ref.benchmark != "latency" or ref.size_bytes != 0:
            continue
        model = path_latency(PATH_CLASSES[ref.path_class], 0, params) * 1e6
        quoted = MODEL_VALUES.get(rid)
        if quoted is not None:
            assert abs(quoted - model) < 5e-3, (rid, quoted, model)
        rows.append(ReportRow("latency", ref.path_class, 2, 0, "paper_vs_model", ref.value,
                              round(model, 6), rid, _r(deviation_pct(ref.value, model))))
        rows.append(ReportRow("latency", ref.path_class, 2, 0, "model_vs_paper", round(model, 6),
                              ref.value, rid, _r(deviation_pct(model, ref.value))))
    return rows


def join(results: list[ReportRow]) -> list[ReportRow]:
    """Result rows that have a reference, with deviation against that reference."""
    out = []
    for r in results:
        for rid, ref in REFERENCES.items():
            if (ref.benchmark, ref.path_class, ref.n_ranks, ref.size_bytes, ref.metric) == \
                    (r.benchmark, r.path_class, r.n_ranks, r.size_bytes, r.metric):
                out.append(ReportRow(r.benchmark, r.path_class, r.n_ranks, r.size_bytes,
                                     "sim_vs_paper", r.value, r.model_value, rid,
                                     _r(deviation_pct(r.value, ref.value))))
    return out


def compare(results: list[ReportRow] | None = None,
            params: CalibrationParams = DEFAULT_PARAMS) -> list[ReportRow]:
    return model_rows(params) + join(results or [])


def flagged(rows, limit: float = FLAG_PCT) -> list[ReportRow]:
    return [r for r in rows if r.deviation_pct is not None and abs(r.deviation_pct) > limit]
