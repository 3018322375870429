"""Lossless cell fabric: cut-through switches, credit flow control, dateline VCs.

Traffic moves as :class:`Frame` objects, each a run of one or more cells of a
single flow that travel back to back. Credits are counted in max-size cells,
so a frame of ``n`` cells needs ``n`` credits on the next buffer.
"""
from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

from .gvas import WIRE_BYTES, GlobalVirtualAddress
from .latmodel import CELL_CONTROL, CELL_PAYLOAD, CELL_WIRE, CalibrationParams
from .sim import Simulator, ns, ser_ps
from .topology import Hop, LinkClass, Topology

HEADER_BYTES = 16
FOOTER_BYTES = 16
N_VCS = 2


class DeadlockDetected(RuntimeError):
    pass


class NoCredit(RuntimeError):
    pass


class CellType(IntEnum):
    DATA = 0
    PACKET = 1
    ACK = 2
    NACK = 3
    NOTIFY = 4
    BLOCK_ACK = 5
    BLOCK_NACK = 6
    READ_REQ = 7


_HDR = struct.Struct(">10sBH3x")  # dst GVA, cell type, payload length
_FTR = struct.Struct(">IIII")  # source id, sequence, checksum, reserved


@dataclass
class Cell:
    """One fabric cell: 16-byte header, up to 256 bytes payload, 16-byte footer."""
    dst: GlobalVirtualAddress
    cell_type: CellType
    src: int
    seq: int
    payload: bytes = b""
    checksum: int = 0  # placeholder, always valid

    def __post_init__(self):
        if len(self.payload) > CELL_PAYLOAD:
            raise ValueError(f"cell payload {len(self.payload)} > {CELL_PAYLOAD}")

    @property
    def wire_bytes(self) -> int:
        return CELL_CONTROL + len(self.payload)

    def header(self) -> bytes:
        return _HDR.pack(self.dst.to_bytes(), int(self.cell_type), len(self.payload))

    def footer(self) -> bytes:
        return _FTR.pack(self.src, self.seq & 0xFFFFFFFF, self.checksum, 0)

    def to_bytes(self) -> bytes:
        return self.header() + self.payload + self.footer()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Cell":
        gva, ctype, plen = _HDR.unpack_from(raw, 0)
        payload = raw[HEADER_BYTES:HEADER_BYTES + plen]
        src, seq, csum, _ = _FTR.unpack_from(raw, HEADER_BYTES + plen)
        return cls(GlobalVirtualAddress.from_bytes(gva), CellType(ctype), src, seq, payload, csum)


assert _HDR.size == HEADER_BYTES and _FTR.size == FOOTER_BYTES and WIRE_BYTES == 10


def segment_payload(n_bytes: int) -> list[int]:
    """Per-cell payload sizes; zero bytes still needs one control cell."""
    if n_bytes < 0:
        raise ValueError("n_bytes must be >= 0")
    if n_bytes == 0:
        return [0]
    full, rem = divmod(n_bytes, CELL_PAYLOAD)
    return [CELL_PAYLOAD] * full + ([rem] if rem else [])


def allocate_virtual_channels(route) -> list[int]:
    """Dateline rule: within a torus dimension, VC 0 until the wraparound link, VC 1 from it on."""
    vcs = []
    dim, crossed = None, False
    for hop in route:
        if hop.dim < 0:
            vcs.append(0)
            continue
        if hop.dim != dim:
            dim, crossed = hop.dim, False
        if hop.wrap:
            crossed = True
        vcs.append(1 if crossed else 0)
    return vcs


class Frame:
    __slots__ = ("src", "dst", "payloads", "kind", "body", "wire", "seq", "hops", "vcs",
                 "lat", "hop_i", "on_deliver", "tail_rate")

    def __init__(self, src: int, dst: int, payloads, kind: str = "data", body=None):
        self.src = src
        self.dst = dst
        self.payloads = tuple(payloads)
        if not self.payloads or max(self.payloads) > CELL_PAYLOAD or min(self.payloads) < 0:
            raise ValueError(f"bad cell payload sizes {self.payloads}")
        self.kind = kind
        self.body = body
        self.wire = sum(self.payloads) + CELL_CONTROL * len(self.payloads)
        self.seq = -1

    @property
    def n_cells(self) -> int:
        return len(self.payloads)

    @property
    def payload_bytes(self) -> int:
        return sum(self.payloads)


class LinkPort:
    """Output side of a directed link plus the input buffer it feeds."""

    def __init__(self, key, cls: LinkClass, params: CalibrationParams):
        self.key = key
        self.cls = cls
        self.rate = params.link_rate(cls)
        self.n_vcs = N_VCS if cls.external else 1
        per_port = params.credits_per_port
        self.capacity = per_port // self.n_vcs  # credits per VC
        self.buffer_capacity = params.buffer_bytes
        self.credits = [self.capacity] * self.n_vcs
        self.queues = [deque() for _ in range(self.n_vcs)]
        self.busy_until = 0
        self.gap_ps = ns(params.link_cell_gap_ns(cls))
        self.rr = 0
        self.wake_at = -1
        self.occupancy = 0
        self.max_occupancy = 0
        self.credits_consumed = 0
        self.credits_returned = 0
        self.cells = 0

    def waiting(self) -> int:
        return sum(len(q) for q in self.queues)


@dataclass
class FabricStats:
    frames_injected: int = 0
    cells_injected: int = 0
    cells_delivered: int = 0
    frames_delivered: int = 0
    cells_queued: int = 0
    max_occupancy: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "frames_injected": self.frames_injected,
            "cells_injected": self.cells_injected,
            "cells_delivered": self.cells_delivered,
            "cells_queued": self.cells_queued,
            "max_port_occupancy": max(self.max_occupancy.values(), default=0),
        }


class Fabric:
    def __init__(self, sim: Simulator, topology: Topology, params: CalibrationParams, trace=None):
        self.sim = sim
        self.topology = topology
        self.params = params
        self.trace = trace
        self.ports = {k: LinkPort(k, c, params) for k, c in topology.ports.items()}
        self.switch_ps = ns(params.switch_latency_ns)
        self.link_ps = ns(params.link_latency_ns)
        self.router_ps = ns(params.router_latency_ns)
        self.internal_rate = params.internal_gbps * 1e9
        self.loopback_busy = [0] * topology.n_nodes
        self.stats = FabricStats()
        self._flow_seq: dict = {}
        self._flow_last: dict = {}
        self._flow_enq: dict = {}
        self._routes: dict = {}
        self.backlog = [0] * topology.n_nodes  # frames waiting for their first link
        self.launch_listeners = []  # called with each frame as it leaves its source

    # --- route preparation ------------------------------------------------
    def _route_info(self, src, dst):
        info = self._routes.get((src, dst))
        if info is None:
            hops = self.topology.route(src, dst)
            vcs = allocate_virtual_channels(hops)
            lat = []
            first_ext = True
            for h in hops:
                t = self.link_ps
                if h.link_class.external:
                    t += self.router_ps * (2 if first_ext else 1)
                    first_ext = False
                lat.append(t)
            rate = min(self.ports[h.port].rate for h in hops)
            ports = [self.ports[h.port] for h in hops]
            info = self._routes[(src, dst)] = (ports, vcs, lat, rate)
        return info

    def max_frame_cells(self, src: int, dst: int) -> int:
        """Largest frame that keeps three frames in flight per VC buffer."""
        if src == dst:
            return 4
        ports = self._route_info(src, dst)[0]
        return max(1, min(p.capacity for p in ports) // 3)

    # --- injection --------------------------------------------------------
    def send(self, frame: Frame, on_deliver):
        """Inject at sim.now; ``on_deliver(frame)`` fires when the tail reaches dst."""
        sim = self.sim
        key = (frame.src, frame.dst)
        seq = self._flow_seq.get(key, 0)
        self._flow_seq[key] = seq + 1
        frame.seq = seq
        frame.on_deliver = on_deliver
        self.stats.frames_injected += 1
        self.stats.cells_injected += frame.n_cells
        self._trace("inject", frame, "src")
        # store-and-forward of the first cell into the source switch
        t = sim.now + ser_ps(CELL_CONTROL + frame.payloads[0], self.internal_rate)
        if frame.src == frame.dst:
            start = max(t, self.loopback_busy[frame.src])
            self.loopback_busy[frame.src] = start + ser_ps(frame.wire, self.internal_rate)
            self.backlog[frame.src] += 1
            sim.at(start, self._loop_launched, frame)
            done = start + ser_ps(frame.wire - CELL_CONTROL, self.internal_rate)
            self._deliver_at(frame, done)
            return
        ports, vcs, lat, rate = self._route_info(frame.src, frame.dst)
        frame.hops = ports
        frame.vcs = vcs
        frame.lat = lat
        frame.tail_rate = rate
        frame.hop_i = 0
        self.backlog[frame.src] += 1
        # a short frame must not overtake a longer one of the same flow in the source switch
        t = max(t, self._flow_enq.get(key, 0))
        self._flow_enq[key] = t
        sim.at(t, self._enqueue, frame)

    def inject_cell(self, cell: Cell, src: int, dst: int, on_deliver, kind="cell"):
        frame = Frame(src, dst, [len(cell.payload)], kind, cell)
        self.send(frame, on_deliver)
        return frame

    def _enqueue(self, frame: Frame):
        port = frame.hops[frame.hop_i]
        port.queues[frame.vcs[frame.hop_i]].append(frame)
        self._service(port)

    def _service(self, port: LinkPort):
        sim = self.sim
        now = sim.now
        if port.busy_until > now:
            if port.wake_at != port.busy_until:
                port.wake_at = port.busy_until
                sim.at(port.busy_until, self._service, port)
            return
        n_vcs = port.n_vcs
        for k in range(n_vcs):
            vc = (port.rr + k) % n_vcs
            q = port.queues[vc]
            if q and port.credits[vc] >= len(q[0].payloads):
                port.rr = (vc + 1) % n_vcs
                self._grant(port, vc, q.popleft())
                break
        else:
            return  # idle, or waiting for a credit return
        if any(port.queues):
            port.wake_at = port.busy_until
            sim.at(port.busy_until, self._service, port)

    def _grant(self, port: LinkPort, vc: int, frame: Frame):
        sim = self.sim
        now = sim.now
        n = len(frame.payloads)
        port.credits[vc] -= n
        port.credits_consumed += n
        port.cells += n
        port.occupancy += frame.wire
        if port.occupancy > port.max_occupancy:
            port.max_occupancy = port.occupancy
        ser = ser_ps(frame.wire, port.rate) + n * port.gap_ps
        port.busy_until = now + ser
        i = frame.hop_i
        if i == 0:
            self.backlog[frame.src] -= 1
            self._launched(frame)
        else:
            prev = frame.hops[i - 1]
            sim.at(now + ser + self.link_ps, self._credit_return, prev, frame.vcs[i - 1], frame)
        arrival = now + frame.lat[i]
        if self.trace is not None:
            self._trace("hop", frame, f"{port.key[0]}->{port.key[1]}/vc{vc}")
        if i + 1 < len(frame.hops):
            frame.hop_i = i + 1
            sim.at(arrival, self._enqueue, frame)
        else:
            done = arrival + ser_ps(frame.wire - CELL_CONTROL, frame.tail_rate)
            done = self._deliver_at(frame, done)
            sim.at(done + self.link_ps, self._credit_return, port, vc, frame)

    def _loop_launched(self, frame: Frame):
        self.backlog[frame.src] -= 1
        self._launched(frame)

    def _launched(self, frame: Frame):
        for fn in self.launch_listeners:
            fn(frame)

    def _credit_return(self, port: LinkPort, vc: int, frame: Frame):
        n = len(frame.payloads)
        port.credits[vc] += n
        port.credits_returned += n
        port.occupancy -= frame.wire
        if port.queues[vc]:
            self._service(port)

    def _deliver_at(self, frame: Frame, t: int) -> int:
        key = (frame.src, frame.dst)
        last = self._flow_last.get(key, 0)
        if t < last:
            t = last  # in-order ejection per flow
        self._flow_last[key] = t
        self.sim.at(t, self._deliver, frame)
        return t

    def _deliver(self, frame: Frame):
        self.stats.cells_delivered += frame.n_cells
        self.stats.frames_delivered += 1
        self._trace("deliver", frame, "dst")
        frame.on_deliver(frame)

    # --- control ----------------------------------------------------------
    def queued_cells(self) -> int:
        return sum(sum(len(f.payloads) for f in q) for p in self.ports.values() for q in p.queues)

    def advance(self, until: int | None = None) -> FabricStats:
        self.sim.run(until)
        queued = self.queued_cells()
        self.stats.cells_queued = queued
        self.stats.max_occupancy = {k: p.max_occupancy for k, p in self.ports.items() if p.cells}
        if queued and not len(self.sim.queue):
            raise DeadlockDetected(f"{queued} cells stuck waiting for credits")
        return self.stats

    def check_conservation(self) -> bool:
        return all(p.credits_consumed == p.credits_returned
                   and p.credits == [p.capacity] * p.n_vcs for p in self.ports.values())

    def _trace(self, kind, frame, port):
        if self.trace is not None:
            self.trace.append(f"{self.sim.now / 1000:.3f}\t{kind}\t{frame.src}\t{frame.dst}\t{frame.seq}\t{port}")


def full_cell_efficiency() -> float:
    return CELL_PAYLOAD / CELL_WIRE


def cells_for(n_bytes: int) -> int:
    return max(1, math.ceil(n_bytes / CELL_PAYLOAD))
