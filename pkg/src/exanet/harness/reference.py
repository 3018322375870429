"""Published hardware measurements used as reference points.

Each entry: id -> Reference. The id is what lands in the ``paper_ref`` CSV
column; ``source`` says where the number comes from.
"""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Reference:
    benchmark: str
    path_class: str
    n_ranks: int
    size_bytes: int
    metric: str
    value: float
    source: str


def _lat(cls, value, row):
    return Reference("latency", cls, 2, 0, "latency_us", value,
                     f"osu_latency 0-byte summary, path ({row}) {cls}")


REFERENCES: dict[str, Reference] = {
    "lat0.intra_qfdb_sh": _lat("Intra-QFDB-sh", 1.293, "a"),
    "lat0.intra_mezz_sh": _lat("Intra-mezz-sh", 1.579, "b"),
    "lat0.intra_mezz_mh2": _lat("Intra-mezz-mh(2)", 2.0, "c"),
    "lat0.intra_mezz_mh3": _lat("Intra-mezz-mh(3)", 2.111, "d"),
    "lat0.inter_mezz_312": _lat("Inter-mezz(3,1,2)", 2.555, "e"),
    "lat0.intra_fpga": _lat("Intra-FPGA", 1.17, "f"),
    "lat64.intra_qfdb_sh": Reference("latency", "Intra-QFDB-sh", 2, 64, "latency_us", 5.157,
                                     "osu_latency 64-byte message over an intra-QFDB path"),
    "lat4m.intra_qfdb_sh": Reference("latency", "Intra-QFDB-sh", 2, 4 << 20, "latency_us", 2689.4,
                                     "osu_latency 4 MB message over an intra-QFDB path"),
    "bw4m.intra_qfdb_sh": Reference("bw", "Intra-QFDB-sh", 2, 4 << 20, "bandwidth_gbps", 13.104,
                                    "osu_bw link utilization 81.9% of a 16 Gb/s link"),
    "bw4m.intra_mezz_sh": Reference("bw", "Intra-mezz-sh", 2, 4 << 20, "bandwidth_gbps", 6.42,
                                    "osu_bw over a single 10 Gb/s external hop"),
    "bcast.4r.1b": Reference("bcast", "block4", 4, 1, "latency_us", 1.93,
                             "osu_bcast average latency, 4 processes, 1 byte"),
    "allreduce.4r.4b": Reference("allreduce", "block4", 4, 4, "latency_us", 5.34,
                                 "osu_allreduce, 4 ranks on one QFDB, small message"),
    "allreduce.4r.64b": Reference("allreduce", "block4", 4, 64, "latency_us", 33.62,
                                  "osu_allreduce, 4 ranks, 64-byte message"),
    "accel.16r.256b": Reference("allreduce_accel", "accel", 16, 256, "latency_us", 6.79,
                                "accelerated allreduce, 16 ranks, 256 bytes"),
    "accel.128r.256b": Reference("allreduce_accel", "accel", 128, 256, "latency_us", 9.61,
                                 "accelerated allreduce, 128 ranks, 256 bytes"),
    "accel.16r.512b": Reference("allreduce_accel", "accel", 16, 512, "latency_us", 13.38,
                                "accelerated allreduce, 16 ranks, 512 bytes"),
    "accel.16r.1024b": Reference("allreduce_accel", "accel", 16, 1024, "latency_us", 26.11,
                                 "accelerated allreduce, 16 ranks, 1024 bytes"),
    "swallreduce.16r.256b": Reference("allreduce", "block1", 16, 256, "latency_us", 39.7,
                                      "software allreduce, 16 ranks, 256 bytes"),
    "swallreduce.128r.256b": Reference("allreduce", "block1", 128, 256, "latency_us", 76.9,
                                       "software allreduce, 128 ranks, 256 bytes"),
}

# analytic model expectations quoted next to the measurements
MODEL_VALUES = {
    "lat0.inter_mezz_312": 2.615,
}


def lookup(benchmark: str, path_class: str, n_ranks: int, size: int, metric: str):
    """Return (id, Reference) matching a result row, or (None, None)."""
    for rid, ref in REFERENCES.items():
        if (ref.benchmark, ref.path_class, ref.n_ranks, ref.size_bytes, ref.metric) == \
                (benchmark, path_class, n_ranks, size, metric):
            return rid, ref
    return None, None
