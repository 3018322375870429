"""OSU-style benchmark drivers on top of the simulated cluster.

Pair benchmarks place one rank on each named MPSoC (two ranks on one MPSoC
for the intra-FPGA case). Sizes are sent as byte counts without moving real
bytes: timing does not depend on the contents.
"""
from __future__ import annotations

import numpy as np

from ..accel import AccelConfig, FallbackToSoftware, accel_allreduce, accel_dims
from ..collectives import allreduce, barrier, bcast
from ..latmodel import bcast_expected, bcast_step_counts, path_latency
from ..runtime import Cluster, minimal_dims
from ..schedules import RankMap
from ..topology import Topology
from .reference import lookup
from .report import ReportRow, deviation_pct
from .scenario import PAIR_BENCHMARKS, Scenario


class BadRankCount(ValueError):
    pass


def _row(bench, pclass, n, size, metric, value, model=None):
    rid, ref = lookup(bench, pclass, n, size, metric)
    dev = deviation_pct(value, ref.value if ref else model)
    return ReportRow(bench, pclass, n, size, metric, round(value, 6),
                     None if model is None else round(model, 6), rid or "",
                     None if dev is None else round(dev, 3))


def pair_cluster(scn: Scenario, a_name: str, b_name: str, move_bytes: bool = False,
                 sink: list | None = None):
    """Cluster with two ranks per FPGA; returns (cluster, rank a, rank b, path class)."""
    topo = Topology(scn.dims)
    a = topo.index(topo.parse_mpsoc(a_name))
    b = topo.index(topo.parse_mpsoc(b_name))
    c = Cluster(2 * topo.n_nodes, dims=scn.dims, params=scn.params, ranks_per_fpga=2,
                seed=scn.seed, loss_rate=scn.loss_rate, move_bytes=move_bytes,
                trace=sink is not None)
    if sink is not None:
        sink.append((f"{scn.benchmark} {a_name}-{b_name}", c))
    ra, rb = 2 * a, 2 * b + (1 if a == b else 0)
    return c, ra, rb, topo.path_class(a, b)


def pingpong(c: Cluster, a: int, b: int, size: int, iters: int, warmup: int) -> float:
    """Half round trip in seconds, averaged over the post-warmup iterations."""
    marks = {}

    def prog(rk):
        for i in range(iters):
            if i == warmup:
                marks["t0"] = rk.now
            if rk.rank == a:
                yield from rk.send(b, size)
                yield from rk.recv(b)
            else:
                yield from rk.recv(a)
                yield from rk.send(a, size)
        if rk.rank == a:
            marks["t1"] = rk.now
    c.run(prog, ranks=[a, b])
    return (marks["t1"] - marks["t0"]) / (iters - warmup) / 2 * 1e-12


def bandwidth(c: Cluster, a: int, b: int, size: int, iters: int, warmup: int,
              window: int, both: bool = False) -> float:
    """osu_bw / osu_bibw: windows of non-blocking sends closed by a short ack. Gb/s."""
    marks = {}

    def prog(rk):
        other = b if rk.rank == a else a
        sender = rk.rank == a or both
        for i in range(iters):
            if i == warmup:
                marks["t0"] = rk.now
            reqs = []
            if sender:
                reqs += [rk.isend(other, size, 100 + j) for j in range(window)]
            if rk.rank == b or both:
                reqs += [rk.irecv(other, 100 + j) for j in range(window)]
            yield from rk.waitall(reqs)
            if rk.rank == a:
                yield from rk.recv(other, 99)
            else:
                yield from rk.send(other, 4, 99)
        if rk.rank == a:
            marks["t1"] = rk.now
    c.run(prog, ranks=[a, b])
    total = size * window * (iters - warmup) * (2 if both else 1)
    return total * 8 / ((marks["t1"] - marks["t0"]) * 1e-12) / 1e9


def one_way(c: Cluster, a: int, b: int, size: int, iters: int, warmup: int) -> float:
    """Blocking send vs blocking receive, both sides released together. Seconds.

    The time of an iteration runs from the send call until both the send and
    the receive have returned.
    """
    spans = []
    m = {}

    def prog(rk):
        for i in range(iters):
            yield from c.align(rk, participants=2)
            if rk.rank == a:
                m["s"] = rk.now
                yield from rk.send(b, size)
                m["se"] = rk.now
            else:
                yield from rk.recv(a)
                m["e"] = rk.now
            yield from c.align(rk, guard_ns=0.0, participants=2)
            if rk.rank == a and i >= warmup:
                spans.append(max(m["e"], m["se"]) - m["s"])
    c.run(prog, ranks=[a, b])
    return sum(spans) / len(spans) * 1e-12


def run_pairs(scn: Scenario, sink: list | None = None) -> list[ReportRow]:
    if scn.benchmark not in PAIR_BENCHMARKS:
        raise ValueError(f"{scn.benchmark} is not a pair benchmark")
    if tuple(scn.n_ranks) != (2,):
        raise BadRankCount(f"{scn.benchmark} runs on exactly 2 ranks, got {scn.n_ranks}")
    rows = []
    for a_name, b_name in scn.pairs:
        for size in scn.sizes:
            c, a, b, pc = pair_cluster(scn, a_name, b_name, sink=sink)
            label = pc.label
            if scn.benchmark == "latency":
                v = pingpong(c, a, b, size, scn.iterations, scn.warmup)
                rows.append(_row("latency", label, 2, size, "latency_us", v * 1e6,
                                 path_latency(pc, size, scn.params) * 1e6))
            elif scn.benchmark == "one_way_lat":
                v = one_way(c, a, b, size, scn.iterations, scn.warmup)
                rows.append(_row("one_way_lat", label, 2, size, "one_way_us", v * 1e6))
            else:
                both = scn.benchmark == "bibw"
                v = bandwidth(c, a, b, size, scn.iterations, scn.warmup, scn.window, both)
                rows.append(_row(scn.benchmark, label, 2, size, "bandwidth_gbps", v))
    return rows


def placement_label(rpf: int) -> str:
    return f"block{rpf}"


def collective_cluster(scn: Scenario, n: int, move_bytes: bool = False,
                       sink: list | None = None) -> Cluster:
    c = Cluster(n, dims=minimal_dims(n, scn.ranks_per_fpga), params=scn.params,
                   ranks_per_fpga=scn.ranks_per_fpga, seed=scn.seed,
                   loss_rate=scn.loss_rate, move_bytes=move_bytes, trace=sink is not None)
    if sink is not None:
        sink.append((f"{scn.benchmark} N={n}", c))
    return c


def one_way_by_class(scn: Scenario, size: int) -> dict[str, float]:
    """One-way latencies (seconds) for single-hop intra-MPSoC, intra-QFDB and inter-QFDB pairs."""
    rpf = scn.ranks_per_fpga
    c_pairs = {"mpsoc": (0, 1), "qfdb": (0, rpf), "mezzanine": (0, 4 * rpf)}
    out = {}
    for cls, (a, b) in c_pairs.items():
        if cls == "mpsoc" and rpf == 1:
            out[cls] = 0.0  # never used: no two ranks share an MPSoC
            continue
        c = Cluster(8 * rpf, params=scn.params, ranks_per_fpga=rpf, seed=scn.seed,
                    move_bytes=False)
        out[cls] = one_way(c, a, b, size, 2, 1)
    return out


def bcast_latency(c: Cluster, size: int, reps: int, root: int = 0) -> float:
    """Mean over reps of (last rank done - common start) after barrier + fence. Seconds."""
    n = c.n_ranks
    spans = []
    ends = [0] * n
    start = {}

    def prog(rk):
        for _ in range(reps):
            yield from barrier(rk)
            yield from c.align(rk)
            start["t"] = rk.now
            yield from bcast(rk, root, size if rk.rank == root else None)
            ends[rk.rank] = rk.now
            yield from barrier(rk)
            if rk.rank == root:
                spans.append(max(ends) - start["t"])
    c.run(prog)
    return sum(spans) / len(spans) * 1e-12


def allreduce_latency(c: Cluster, size: int, reps: int, op: str = "sum",
                      dtype: str = "float32") -> float:
    """Mean over reps of (last rank done - first rank start) after a barrier. Seconds."""
    n = c.n_ranks
    dt = np.dtype(dtype)
    count = max(1, size // dt.itemsize)
    vecs = [np.full(count, r % 7, dtype=dt) for r in range(n)]
    spans = []
    starts, ends = [0] * n, [0] * n

    def prog(rk):
        for _ in range(reps):
            yield from barrier(rk)
            starts[rk.rank] = rk.now
            yield from allreduce(rk, vecs[rk.rank], op)
            ends[rk.rank] = rk.now
            yield from barrier(rk)
            if rk.rank == 0:
                spans.append(max(ends) - min(starts))
    c.run(prog)
    return sum(spans) / len(spans) * 1e-12


def accel_latency(scn: Scenario, n: int, size: int) -> float:
    """Accelerated allreduce latency in seconds; raises FallbackToSoftware."""
    dt = np.dtype(scn.dtype)
    cfg = AccelConfig(n, size, scn.op, scn.dtype)
    cfg.check()
    vecs = [np.full(max(1, size // dt.itemsize), r % 7, dtype=dt) for r in range(n)]
    _, lat = accel_allreduce(cfg, vecs, scn.params, dims=accel_dims(n))
    return lat


def run_collective(scn: Scenario, sink: list | None = None) -> list[ReportRow]:
    rows = []
    label = placement_label(scn.ranks_per_fpga)
    for n in scn.n_ranks:
        if n < 1:
            raise BadRankCount(f"collectives need N >= 1, got {n}")
        for size in scn.sizes:
            if scn.benchmark == "bcast":
                if n == 1:
                    rows.append(_row("bcast", label, 1, size, "latency_us", 0.0, 0.0))
                    continue
                c = collective_cluster(scn, n, sink=sink)
                v = bcast_latency(c, size, scn.repetitions)
                exp = bcast_expected(n, size, c.placement, scn.params, one_way_by_class(scn, size))
                rows.append(_row("bcast", label, n, size, "latency_us", v * 1e6, exp * 1e6))
                continue
            sw = None
            if scn.benchmark == "allreduce":
                sw = allreduce_latency(collective_cluster(scn, n, True, sink), size, scn.repetitions,
                                       scn.op, scn.dtype)
                rows.append(_row("allreduce", label, n, size, "latency_us", sw * 1e6))
            if scn.benchmark == "allreduce_accel" or scn.accel:
                try:
                    v = accel_latency(scn, n, size)
                    rows.append(_row("allreduce_accel", "accel", n, size, "latency_us", v * 1e6))
                    if sw is not None:
                        rows.append(_row("allreduce_accel", "accel", n, size, "reduction_pct",
                                         (1 - v / sw) * 100))
                except FallbackToSoftware:
                    if sw is None:
                        sw = allreduce_latency(collective_cluster(scn, n, True, sink), size,
                                               scn.repetitions, scn.op, scn.dtype)
                    rows.append(_row("allreduce_accel", "fallback", n, size, "latency_us", sw * 1e6))
    return rows


def bcast_counts(n: int, rpf: int) -> tuple[int, int, int]:
    return bcast_step_counts(n, RankMap(Topology(minimal_dims(n, rpf)), n, rpf))


def run(scn: Scenario, sink: list | None = None) -> list[ReportRow]:
    """Execute a scenario and return its report rows.

    With ``sink`` (a list), every cluster is built with tracing on and
    appended as (label, cluster) so the caller can dump its trace.
    """
    if scn.benchmark in PAIR_BENCHMARKS:
        return run_pairs(scn, sink)
    return run_collective(scn, sink)
