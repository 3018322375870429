"""Fit the software overheads so probe simulations hit the measured anchor latencies.

Each overhead is solved in turn with a secant iteration on its own probe:

==================  =============================================
eager_ns            0-byte ping-pong, two ranks on one FPGA
ctl_ns              64-byte ping-pong across a QFDB (rendez-vous)
allreduce_setup_ns  4-byte allreduce on four ranks of one FPGA
accel_trigger_ns    256-byte accelerated allreduce on 16 ranks
==================  =============================================
"""
from __future__ import annotations

import numpy as np

from .latmodel import DEFAULT_PARAMS, CalibrationParams
from .runtime import Cluster, RuntimeCosts


def pingpong_latency_ps(cluster: Cluster, a: int, b: int, size, iters: int = 4,
                        warmup: int = 2) -> float:
    """Half round trip averaged over ``iters`` after ``warmup`` exchanges."""
    marks = {}

    def prog(rk):
        for i in range(warmup + iters):
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
    cluster.run(prog, ranks=[a, b])
    return (marks["t1"] - marks["t0"]) / iters / 2


def allreduce_span_ps(cluster: Cluster, nbytes: int, op: str = "sum", reps: int = 1) -> float:
    """Mean over reps of (last rank done - first rank start) after a barrier."""
    from .collectives import allreduce, barrier
    n = cluster.n_ranks
    vec = [np.full(max(1, nbytes // 4), r, dtype=np.int32) for r in range(n)]
    spans = []
    starts, ends = [0] * n, [0] * n

    def prog(rk):
        for _ in range(reps):
            yield from barrier(rk)
            starts[rk.rank] = rk.now
            yield from allreduce(rk, vec[rk.rank], op)
            ends[rk.rank] = rk.now
            yield from barrier(rk)
            if rk.rank == 0:
                spans.append(max(ends) - min(starts))
    cluster.run(prog)
    return sum(spans) / len(spans)


def probe_eager(params: CalibrationParams, costs: RuntimeCosts) -> float:
    return pingpong_latency_ps(Cluster(2, params=params, costs=costs), 0, 1, 0) / 1e3


def probe_rendezvous(params: CalibrationParams, costs: RuntimeCosts) -> float:
    return pingpong_latency_ps(Cluster(8, params=params, costs=costs), 0, 4, 64) / 1e3


def probe_allreduce(params: CalibrationParams, costs: RuntimeCosts) -> float:
    return allreduce_span_ps(Cluster(4, params=params, costs=costs), 4) / 1e3


def probe_accel(params: CalibrationParams, costs: RuntimeCosts) -> float:
    from .accel import AccelConfig, accel_allreduce
    vecs = [np.zeros(64, dtype=np.float32)] * 16
    _, lat = accel_allreduce(AccelConfig(16, 256), vecs, params, costs.accel_trigger_ns)
    return lat * 1e9


PROBES = (
    ("eager_ns", probe_eager, "base_intra_fpga_ns"),
    ("ctl_ns", probe_rendezvous, "rdma_small_latency_64b_ns"),
    ("allreduce_setup_ns", probe_allreduce, "allreduce_4r_4b_ns"),
    ("accel_trigger_ns", probe_accel, "accel_16r_256b_ns"),
)


def _secant(f, x0: float, x1: float, tol: float = 0.01, max_iter: int = 20) -> float:
    f0, f1 = f(x0), f(x1)
    for _ in range(max_iter):
        if abs(f1) <= tol or f1 == f0:
            break
        x0, x1, f0 = x1, max(0.0, x1 - f1 * (x1 - x0) / (f1 - f0)), f1
        f1 = f(x1)
    return x1


def calibrate(params: CalibrationParams = DEFAULT_PARAMS,
              start: RuntimeCosts | None = None) -> tuple[RuntimeCosts, dict]:
    """Return fitted costs and per-probe residuals (ns)."""
    costs = start or RuntimeCosts()
    residuals = {}
    for field, probe, target_field in PROBES:
        target = getattr(params, target_field)

        def err(x, field=field, probe=probe, target=target):
            return probe(params, costs.with_overrides(**{field: x})) - target
        x0 = getattr(costs, field)
        x = round(_secant(err, x0, x0 * 0.9 + 1.0), 3)
        costs = costs.with_overrides(**{field: x})
        residuals[field] = err(x)
    return costs, residuals
