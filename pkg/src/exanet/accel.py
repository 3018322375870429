"""Hardware allreduce accelerator on QFDBs: clients gather to the Network FPGA, servers exchange.

Level 0 reduces the four ranks of a QFDB on its Network FPGA as
(F1+F2)+(F3+F4). Servers then swap partial results with partners at rank
distance 4, 8, ..., N/2, and each server finally sends the result back to its
three clients. Vectors longer than 256 bytes run as back-to-back 256-byte
invocations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collectives import DTYPES, OPS
from .fabric import Fabric, Frame, segment_payload
from .latmodel import DEFAULT_PARAMS, CalibrationParams
from .sim import Simulator, ns
from .topology import FPGAS_PER_QFDB, Topology

MAX_RANKS = 1024
BLOCK_BYTES = 256
DEFAULT_TRIGGER_NS = 3892.732


class InvalidRankCount(ValueError):
    pass


class FallbackToSoftware(Exception):
    """The request violates an accelerator constraint; use the software allreduce."""


@dataclass(frozen=True)
class AccelConfig:
    n_ranks: int
    vector_bytes: int
    op: str = "sum"
    dtype: str = "float32"
    ranks_per_fpga: int = 1

    def check(self):
        if self.op not in OPS:
            raise FallbackToSoftware(f"operation {self.op!r} not supported in hardware")
        if self.dtype not in DTYPES:
            raise FallbackToSoftware(f"type {self.dtype!r} not supported in hardware")
        if self.ranks_per_fpga != 1:
            raise FallbackToSoftware("at most one rank per FPGA")
        if self.vector_bytes <= 0 or self.vector_bytes % np.dtype(self.dtype).itemsize:
            raise FallbackToSoftware("vector size must be a positive multiple of the element size")
        try:
            build_accel_schedule(self.n_ranks)
        except InvalidRankCount as exc:
            raise FallbackToSoftware(str(exc)) from None

    @property
    def n_blocks(self) -> int:
        return -(-self.vector_bytes // BLOCK_BYTES)


@dataclass(frozen=True)
class Level:
    kind: str  # "gather" | "exchange" | "broadcast"
    distance: int = 0


def build_accel_schedule(n_ranks: int) -> list[Level]:
    if n_ranks < 4 or n_ranks % 4 or n_ranks > MAX_RANKS or n_ranks & (n_ranks - 1):
        raise InvalidRankCount(f"{n_ranks} ranks: need a power of two, multiple of 4, <= {MAX_RANKS}")
    levels = [Level("gather")]
    d = FPGAS_PER_QFDB
    while d < n_ranks:
        levels.append(Level("exchange", d))
        d *= 2
    levels.append(Level("broadcast"))
    return levels


def accel_dims(n_ranks: int) -> tuple[int, int, int]:
    q = n_ranks // FPGAS_PER_QFDB
    if q <= 4:
        return (q, 1, 1)
    if q <= 16:
        return (4, q // 4, 1)
    return (4, 4, q // 16)


class Accelerator:
    """Runs accelerated allreduce invocations on a fabric, one rank per FPGA."""

    def __init__(self, fabric: Fabric, params: CalibrationParams = DEFAULT_PARAMS,
                 trigger_ns: float = DEFAULT_TRIGGER_NS):
        self.fabric = fabric
        self.sim = fabric.sim
        self.params = params
        self.trigger_ps = ns(trigger_ns)
        self.reduce_ps = ns(BLOCK_BYTES / params.accel_bytes_per_cycle * 1e3 / params.clock_mhz)

    def allreduce(self, vectors, config: AccelConfig):
        """Reduce ``vectors`` (one per rank). Returns (per-rank results, latency in ps)."""
        config.check()
        if len(vectors) != config.n_ranks:
            raise ValueError("one vector per rank required")
        if config.n_ranks > self.fabric.topology.n_nodes:
            raise FallbackToSoftware("not enough FPGAs for one rank each")
        dt = np.dtype(config.dtype)
        vecs = [np.ascontiguousarray(v, dtype=dt).reshape(-1) for v in vectors]
        per_block = BLOCK_BYTES // dt.itemsize
        start = self.sim.now
        outs = []
        for b in range(config.n_blocks):
            chunk = [v[b * per_block:(b + 1) * per_block] for v in vecs]
            done = self.sim.process(self._invoke(chunk, config), f"accel-block{b}")
            self.fabric.advance()
            outs.append(done.value)
        results = [np.concatenate([o[r] for o in outs]) for r in range(config.n_ranks)]
        return results, self.sim.now - start

    def _send(self, src: int, dst: int, value: np.ndarray):
        ev = self.sim.event()
        frame = Frame(src, dst, segment_payload(value.nbytes), "accel", value)
        if src == dst:
            ev.succeed(value)
        else:
            self.fabric.send(frame, lambda f: ev.succeed(f.body))
        return ev

    def _invoke(self, chunk, config: AccelConfig):
        sim = self.sim
        op = OPS[config.op]
        n = config.n_ranks
        half = self.trigger_ps // 2
        yield half  # software trigger on every rank
        n_servers = n // FPGAS_PER_QFDB
        # level 0: clients to their server
        partial = []
        gathers = []
        for q in range(n_servers):
            server = q * FPGAS_PER_QFDB
            gathers.append([self._send(server + f, server, chunk[server + f])
                            for f in range(FPGAS_PER_QFDB)])
        vals = yield sim.all_of([e for g in gathers for e in g])
        for q in range(n_servers):
            v = vals[q * 4:(q + 1) * 4]
            partial.append(op(op(v[0], v[1]), op(v[2], v[3])))
        yield 2 * self.reduce_ps
        # server exchanges at doubling rank distance
        d = 1
        while d < n_servers:
            evs = [self._send(q * 4, (q ^ d) * 4, partial[q]) for q in range(n_servers)]
            got = yield sim.all_of(evs)
            nxt = [None] * n_servers
            for q in range(n_servers):
                other = got[q ^ d]  # value sent by the partner
                nxt[q] = op(partial[q], other) if q < (q ^ d) else op(other, partial[q])
            partial = nxt
            yield self.reduce_ps
            d *= 2
        # broadcast back to clients
        evs = [self._send(q * 4, q * 4 + f, partial[q])
               for q in range(n_servers) for f in range(FPGAS_PER_QFDB)]
        res = yield sim.all_of(evs)
        yield self.trigger_ps - half
        return res


def accel_allreduce(config: AccelConfig, vectors, params: CalibrationParams = DEFAULT_PARAMS,
                    trigger_ns: float = DEFAULT_TRIGGER_NS, dims=None):
    """Convenience wrapper: fresh simulator sized for ``config``; returns (results, seconds)."""
    config.check()
    sim = Simulator()
    fabric = Fabric(sim, Topology(dims or accel_dims(config.n_ranks)), params)
    acc = Accelerator(fabric, params, trigger_ns)
    results, lat = acc.allreduce(vectors, config)
    return results, lat * 1e-12
