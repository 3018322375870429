"""Calibration constants and closed-form latency models.

Times are kept in nanoseconds inside :class:`CalibrationParams`; the public
model functions return seconds.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields, replace
from typing import Mapping

from .topology import LinkClass, PathClass

CELL_PAYLOAD = 256
CELL_CONTROL = 32  # 16 B header + 16 B footer
CELL_WIRE = CELL_PAYLOAD + CELL_CONTROL


@dataclass(frozen=True)
class CalibrationParams:
    # measured one-hop constants
    link_latency_ns: float = 120.0  # L_l, 1.293 - 1.17
    router_latency_ns: float = 145.0  # L_ER, (409 - 120) / 2
    base_intra_fpga_ns: float = 1170.0  # 0-byte MPI latency, two ranks on one FPGA
    pkt_hw_one_way_ns: float = 470.0  # raw packetizer->mailbox, adjacent FPGAs
    copy_ns: float = 125.0  # one user<->NI copy, midpoint of 100..150 ns
    rdma_small_latency_64b_ns: float = 5157.0  # 64-B MPI message, intra-QFDB
    firmware_overhead_ns: float = 3000.0  # R5 invocation, midpoint of 2..4 us
    # rates
    rdma_rate_gbps: float = 12.475  # one transfer, end to end
    engine_peak_gbps: float = 19.2  # 128-bit AXI read channel at 150 MHz
    intra_qfdb_gbps: float = 16.0
    intra_mezz_gbps: float = 10.0
    inter_mezz_gbps: float = 10.0
    internal_gbps: float = 19.2  # on-chip links, 128 bit x 150 MHz
    intra_qfdb_goodput: float = 0.819  # osu_bw utilization of a 16 Gb/s link
    external_goodput: float = 0.642  # osu_bw utilization of a 10 Gb/s link
    clock_mhz: float = 150.0
    switch_cycles: int = 2
    # fabric
    buffer_bytes: int = 4096
    # endpoints
    pkt_timeout_ns: float = 10_000.0
    pkt_max_retries: int = 8
    mailbox_capacity: int = 256
    dedup_window: int = 64
    # rdma
    block_bytes: int = 16384
    block_ack_timeout_ns: float = 50_000.0
    fault_service_ns: float = 100_000.0
    tlb_walk_ns: float = 0.0
    tlb_entries: int = 64
    notification_bytes: int = 8
    # runtime
    eager_threshold: int = 32
    memcpy_ns_per_byte: float = 0.25
    reduce_ns_per_byte: float = 1.0
    allreduce_4r_4b_ns: float = 5340.0  # calibration target for collective setup cost
    # allreduce accelerator
    accel_16r_256b_ns: float = 6790.0  # calibration target for trigger cost
    accel_bytes_per_cycle: int = 16

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("tlb_walk_ns", "memcpy_ns_per_byte", "reduce_ns_per_byte"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0")
            elif v <= 0:
                raise ValueError(f"{f.name} must be > 0, got {v}")
        if self.rdma_rate_gbps > self.intra_qfdb_gbps * 16 / 18:
            raise ValueError("rdma_rate exceeds intra-QFDB payload capacity")
        if self.eager_threshold + 8 > 56:
            raise ValueError("eager threshold exceeds the 56-byte packetizer budget")

    # --- derived ----------------------------------------------------------
    @property
    def switch_latency_ns(self) -> float:
        return self.switch_cycles * 1e3 / self.clock_mhz

    @property
    def credits_per_port(self) -> int:
        return self.buffer_bytes // CELL_WIRE

    def link_rate(self, cls: LinkClass) -> float:
        return {LinkClass.INTRA_QFDB: self.intra_qfdb_gbps,
                LinkClass.INTRA_MEZZ: self.intra_mezz_gbps,
                LinkClass.INTER_MEZZ: self.inter_mezz_gbps}[cls] * 1e9

    def link_goodput(self, cls: LinkClass) -> float:
        """Sustained payload rate of a saturated link, bits/s."""
        frac = self.external_goodput if cls.external else self.intra_qfdb_goodput
        return self.link_rate(cls) * frac

    def link_cell_gap_ns(self, cls: LinkClass) -> float:
        """Per-cell link-level control time that trails every full cell."""
        wire = CELL_WIRE * 8 / self.link_rate(cls) * 1e9
        full = CELL_PAYLOAD * 8 / self.link_goodput(cls) * 1e9
        return max(0.0, full - wire)

    def with_overrides(self, **kw) -> "CalibrationParams":
        return replace(self, **kw)

    # --- structured text ------------------------------------------------
    def to_text(self, section="calibration") -> str:
        lines = [f"[{section}]"]
        lines += [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "CalibrationParams":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in kv.items():
            if k not in types:
                raise KeyError(f"unknown calibration key {k!r}")
            kw[k] = int(v) if types[k] in (int, "int") else float(v)
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str, section="calibration") -> "CalibrationParams":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        return cls.from_mapping(dict(cp[section])) if cp.has_section(section) else cls()


DEFAULT_PARAMS = CalibrationParams()


def zero_byte_latency_ns(pc: PathClass, params: CalibrationParams = DEFAULT_PARAMS) -> float:
    return (params.base_intra_fpga_ns + pc.switches * params.router_latency_ns
            + pc.hops * params.link_latency_ns)


def _bottleneck(pc: PathClass, params: CalibrationParams) -> float:
    rates = [params.internal_gbps * 1e9]
    if pc.n_intra_qfdb:
        rates.append(params.link_rate(LinkClass.INTRA_QFDB))
    if pc.n_intra_mezz:
        rates.append(params.link_rate(LinkClass.INTRA_MEZZ))
    if pc.n_inter_mezz:
        rates.append(params.link_rate(LinkClass.INTER_MEZZ))
    return min(rates)


def _bottleneck_goodput(pc: PathClass, params: CalibrationParams) -> float:
    rates = [params.internal_gbps * 1e9 * 16 / 18]
    if pc.n_intra_qfdb:
        rates.append(params.link_goodput(LinkClass.INTRA_QFDB))
    if pc.external_hops:
        rates.append(params.link_goodput(LinkClass.INTRA_MEZZ))
    return min(rates)


def path_latency(pc: PathClass, msg_bytes: int = 0,
                 params: CalibrationParams = DEFAULT_PARAMS) -> float:
    """One-way MPI latency over a path, in seconds.

    Zero bytes: base + S*L_ER + H*L_l with S = external hops + 1 routers.
    Eager sizes add payload serialization at the bottleneck link; larger
    messages follow the rendez-vous composition anchored at the measured
    64-byte intra-QFDB latency.
    """
    if msg_bytes < 0:
        raise ValueError("msg_bytes must be >= 0")
    zero = zero_byte_latency_ns(pc, params)
    if msg_bytes <= params.eager_threshold:
        return (zero + msg_bytes * 8 / _bottleneck(pc, params) * 1e9) * 1e-9
    ref = zero_byte_latency_ns(PathClass(n_intra_qfdb=1), params)
    # RTS, CTS and data each cross the path once on the critical path
    extra = 3 * max(0.0, zero - ref)
    rate = min(params.rdma_rate_gbps * 1e9, _bottleneck_goodput(pc, params))
    stream = max(0, msg_bytes - 64) * 8 / rate * 1e9
    return (params.rdma_small_latency_64b_ns + extra + stream) * 1e-9


def bcast_step_counts(n_ranks: int, placement, root: int = 0) -> tuple[int, int, int]:
    """(Ns_MPSoC, Ns_QFDB, Ns_mezzanine) of the binomial broadcast schedule."""
    from .schedules import binomial_bcast_schedule, step_classes
    counts = [0, 0, 0]
    for cls in step_classes(binomial_bcast_schedule(n_ranks, root), placement):
        counts[("mpsoc", "qfdb", "mezzanine").index(cls)] += 1
    return tuple(counts)


def bcast_expected(n_ranks: int, size: int, placement, params: CalibrationParams = DEFAULT_PARAMS,
                   one_way: Mapping[str, float] | None = None, root: int = 0) -> float:
    """Expected broadcast latency in seconds: sum of per-class step counts x one-way latency.

    ``one_way`` maps 'mpsoc' / 'qfdb' / 'mezzanine' to one-way latencies in
    seconds at this size (as measured by the one-way benchmark). Without it
    the analytic :func:`path_latency` of the single-hop class is used.
    """
    if n_ranks < 1:
        raise ValueError("n_ranks must be >= 1")
    counts = bcast_step_counts(n_ranks, placement, root)
    if one_way is None:
        one_way = {
            "mpsoc": path_latency(PathClass(), size, params),
            "qfdb": path_latency(PathClass(n_intra_qfdb=1), size, params),
            "mezzanine": path_latency(PathClass(n_intra_mezz=1), size, params),
        }
    return (counts[0] * one_way["mpsoc"] + counts[1] * one_way["qfdb"]
            + counts[2] * one_way["mezzanine"])


class NonPositiveTime(ValueError):
    pass


def speedup_and_efficiency(t1: float, tN: float, N: int, mode: str) -> tuple[float, float]:
    if t1 <= 0 or tN <= 0:
        raise NonPositiveTime(f"times must be > 0 (t1={t1}, tN={tN})")
    if N < 1:
        raise ValueError("N must be >= 1")
    if mode == "weak":
        sp = N * t1 / tN
    elif mode == "strong":
        sp = t1 / tN
    else:
        raise ValueError(f"mode must be 'weak' or 'strong', not {mode!r}")
    return sp, sp / N


def log2_ceil(n: int) -> int:
    return 0 if n <= 1 else math.ceil(math.log2(n))
