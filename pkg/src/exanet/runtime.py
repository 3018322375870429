"""MPI-like point-to-point layer over the packetizer, mailboxes and RDMA engine.

Messages up to the eager threshold travel as one packetizer message. Larger
ones use a rendez-vous: RTS from the sender, CTS with the receive buffer and
notification addresses, an RDMA write with completion notification, and a
FIN back to the sender.

Rank code is a generator; blocking calls are used with ``yield from``::

    def prog(rank):
        if rank.rank == 0:
            yield from rank.send(1, b"hi")
        else:
            data = yield from rank.recv(0)
        return rank.now

    results = Cluster(2).run(prog)
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, replace

from .endpoints import ChannelState, Endpoints, LossInjector, mailbox_address
from .fabric import Fabric
from .gvas import GlobalVirtualAddress
from .latmodel import DEFAULT_PARAMS, CalibrationParams
from .rdma import RdmaDescriptor, RdmaEngine
from .schedules import RankMap
from .sim import Event, Simulator, ns
from .topology import FPGAS_PER_QFDB, Topology

ANY_SOURCE = -1
ANY_TAG = -1
USER_CTX = 0
COLL_CTX = 1
BARRIER_CTX = 2
DEFAULT_PDID = 1

EAGER, RTS, CTS, FIN = 1, 2, 3, 4
_HDR = struct.Struct(">BBHHH")  # type, eager length, context, tag, per-pair sequence
_RTS = struct.Struct(">QI")  # size, message id
_CTS = struct.Struct(">I10s10s")  # message id, receive buffer, notification slot
_FIN = struct.Struct(">I")
ENVELOPE_BYTES = _HDR.size
NOTIF_BASE = 1 << 36
BUF_BASE = 1 << 20
BUF_LIMIT = 1 << 35


@dataclass(frozen=True)
class RuntimeCosts:
    """Software overheads in ns; defaults come from :mod:`exanet.calibration`."""
    eager_ns: float = 281.667  # per eager send and per eager arrival, plus one copy
    ctl_ns: float = 207.34  # per rendez-vous control step
    allreduce_setup_ns: float = 2651.667  # per allreduce call
    accel_trigger_ns: float = 3892.732  # accelerator start + end interaction
    nack_backoff_ns: float = 1000.0

    def with_overrides(self, **kw) -> "RuntimeCosts":
        return replace(self, **kw)


@dataclass(frozen=True)
class Envelope:
    src: int
    tag: int
    ctx: int
    size: int

    def __post_init__(self):
        if not 0 <= self.ctx < 1 << 16:
            raise ValueError("context id must fit 16 bits")


class _PendingRecv:
    __slots__ = ("src", "tag", "ctx", "req")

    def __init__(self, src, tag, ctx, req):
        self.src, self.tag, self.ctx, self.req = src, tag, ctx, req

    def matches(self, env: Envelope) -> bool:
        return ((self.src == ANY_SOURCE or self.src == env.src)
                and (self.tag == ANY_TAG or self.tag == env.tag) and self.ctx == env.ctx)


class Rank:
    def __init__(self, cluster: "Cluster", rank: int):
        self.cluster = cluster
        self.sim = cluster.sim
        self.rank = rank
        self.node = cluster.placement.node_of(rank)
        self.core = cluster.placement.core_of(rank)
        self.pdid = cluster.pdid
        ep = cluster.endpoints
        self.iface = ep.alloc_packetizer(self.node, self.pdid, self.core)
        self.mbox = ep.alloc_mailbox(self.node, self.pdid, self.core)
        ep.mailbox(self.node, self.mbox).on_arrival = self._on_arrival
        cluster.rdma.register_process(self.node, self.core, self.pdid)
        self.page = cluster.rdma.alloc_page(self.node, self.pdid)
        self.cpu_free = 0
        self._posted: list[_PendingRecv] = []
        self._unexpected: deque = deque()
        self._send_seq: dict[int, int] = {}
        self._recv_seq: dict[int, int] = {}
        self._stash: dict[tuple, tuple] = {}
        self._outq: deque = deque()
        self._notes: deque = deque()
        self._idle: Event | None = None
        self._rdv_send: dict[int, tuple] = {}
        self._rdv_recv: dict[tuple, tuple] = {}
        self._ids = 0
        self._buf = BUF_BASE
        self._wait_chan: deque = deque()
        self.coll_seq = 0
        self.stats = {"eager": 0, "rendezvous": 0}
        self.sim.process(self._dispatcher(), f"dispatch{rank}")

    # --- basics -----------------------------------------------------------
    @property
    def now(self) -> int:
        return self.sim.now

    @property
    def size(self) -> int:
        return self.cluster.n_ranks

    def cpu(self, cost_ps: int):
        """Occupy this rank's core for ``cost_ps`` (queued behind other work)."""
        start = max(self.sim.now, self.cpu_free)
        self.cpu_free = start + int(cost_ps)
        wait = self.cpu_free - self.sim.now
        if wait:
            yield wait

    def compute(self, ns_: float):
        yield from self.cpu(ns(ns_))

    def alloc_buffer(self, size: int) -> int:
        va = self._buf
        self._buf += max(4096, -(-size // 4096) * 4096)
        if self._buf >= BUF_LIMIT:
            self._buf = BUF_BASE
        return va

    def gva(self, va: int) -> GlobalVirtualAddress:
        return GlobalVirtualAddress(self.pdid, self.node, self.core, va)

    # --- packet plumbing --------------------------------------------------
    def _post(self, dst: int, payload: bytes):
        """Queue a packet to ``dst``'s mailbox on a free packetizer channel."""
        self._outq.append((dst, payload))
        self._drain()

    def _drain(self):
        ep = self.cluster.endpoints
        pz = ep.packetizers[self.node][self.iface]
        while self._outq:
            ch = pz.free_channel()
            if ch is None:
                return
            dst, payload = self._outq.popleft()
            peer = self.cluster.ranks[dst]
            addr = mailbox_address(self.pdid, peer.node, peer.mbox, peer.core)
            ep.pkt_send(self.node, self.iface, ch, addr, payload,
                        on_done=lambda txn, d=dst, p=payload: self._pkt_done(txn, d, p))

    def _pkt_done(self, txn, dst, payload):
        ep = self.cluster.endpoints
        if txn.state is ChannelState.TIMED_OUT:
            ep.resume(txn)  # same sequence, so a late duplicate is still suppressed
            return
        if txn.state is ChannelState.NEGATIVELY_ACKNOWLEDGED:
            if txn.reason == "mailbox_full":
                self.sim.schedule(ns(self.cluster.costs.nack_backoff_ns), self._post, dst, payload)
            else:
                self.cluster.errors.append((self.rank, dst, txn.reason))
        self._drain()

    def _matchable(self, dst: int, kind: int, ctx: int, tag: int, body: bytes, eager_len=0):
        seq = self._send_seq.get(dst, 0)
        self._send_seq[dst] = (seq + 1) & 0xFFFF
        return _HDR.pack(kind, eager_len, ctx, tag, seq) + body

    # --- point to point ---------------------------------------------------
    def isend(self, dst: int, data, tag: int = 0, ctx: int = USER_CTX) -> Event:
        """Start a send. ``data`` is bytes, or an int size for payload-free timing runs."""
        return self.sim.process(self._send(dst, data, tag, ctx), f"send{self.rank}->{dst}")

    def send(self, dst: int, data, tag: int = 0, ctx: int = USER_CTX):
        yield self.isend(dst, data, tag, ctx)

    def _send(self, dst, data, tag, ctx):
        costs = self.cluster.costs
        params = self.cluster.params
        size = data if isinstance(data, int) else len(data)
        if not 0 <= dst < self.size:
            raise ValueError(f"bad destination rank {dst}")
        if size <= params.eager_threshold:
            self.stats["eager"] += 1
            yield from self.cpu(ns(costs.eager_ns + params.copy_ns))
            body = bytes(size) if isinstance(data, int) else bytes(data)
            self._post(dst, self._matchable(dst, EAGER, ctx, tag, body, size))
            return size
        self.stats["rendezvous"] += 1
        self._ids += 1
        msg_id = self._ids
        req = self.sim.event()
        buf = self.alloc_buffer(size)
        if not isinstance(data, int) and self.cluster.move_bytes:
            self.cluster.rdma.memories[self.node].write(self.gva(buf).node_va, data)
        self._rdv_send[msg_id] = (req, dst, buf, size)
        yield from self.cpu(ns(costs.ctl_ns))
        self._post(dst, self._matchable(dst, RTS, ctx, tag, _RTS.pack(size, msg_id)))
        yield req
        return size

    def irecv(self, src: int, tag: int = 0, ctx: int = USER_CTX) -> Event:
        req = self.sim.event()
        pending = _PendingRecv(src, tag, ctx, req)
        for i, (env, item) in enumerate(self._unexpected):
            if pending.matches(env):
                del self._unexpected[i]
                self._deliver(pending, env, item)
                return req
        self._posted.append(pending)
        return req

    def recv(self, src: int, tag: int = 0, ctx: int = USER_CTX):
        return (yield self.irecv(src, tag, ctx))

    def sendrecv(self, dst: int, data, src: int, tag: int = 0, ctx: int = USER_CTX):
        rreq = self.irecv(src, tag, ctx)
        sreq = self.isend(dst, data, tag, ctx)
        yield sreq
        return (yield rreq)

    def wait(self, req):
        return (yield req)

    def waitall(self, reqs):
        return (yield self.sim.all_of(reqs))

    # --- progress engine --------------------------------------------------
    def _on_arrival(self, mb):
        self._wake()

    def _wake(self):
        if self._idle is not None:
            ev, self._idle = self._idle, None
            ev.succeed()

    def _dispatcher(self):
        ep = self.cluster.endpoints
        costs = self.cluster.costs
        params = self.cluster.params
        eager_ps = ns(costs.eager_ns + params.copy_ns)
        ctl_ps = ns(costs.ctl_ns)
        while True:
            if self._notes:
                key = self._notes.popleft()
                yield from self.cpu(ctl_ps)
                self._rdv_complete(key)
                continue
            msg = ep.mbox_dequeue(self.node, self.mbox)
            if msg is None:
                self._idle = self.sim.event()
                yield self._idle
                continue
            kind = msg.payload[0]
            yield from self.cpu(eager_ps if kind == EAGER else ctl_ps)
            self._handle(msg)

    def _handle(self, msg):
        raw = msg.payload
        kind = raw[0]
        src = self.cluster.rank_of(msg.src_node, msg.source[1])
        if kind == CTS:
            msg_id, rbuf, notif = _CTS.unpack_from(raw, 1)
            self._start_rdma(msg_id, GlobalVirtualAddress.from_bytes(rbuf),
                             GlobalVirtualAddress.from_bytes(notif))
            return
        if kind == FIN:
            (msg_id,) = _FIN.unpack_from(raw, 1)
            req = self._rdv_send.pop(msg_id)[0]
            req.succeed()
            return
        _, elen, ctx, tag, seq = _HDR.unpack_from(raw, 0)
        expected = self._recv_seq.get(src, 0)
        if seq != expected:
            self._stash[(src, seq)] = (kind, elen, ctx, tag, raw)
            return
        self._accept(src, kind, elen, ctx, tag, raw)
        nxt = (expected + 1) & 0xFFFF
        while (src, nxt) in self._stash:
            self._recv_seq[src] = nxt
            self._accept(src, *self._stash.pop((src, nxt)))
            nxt = (nxt + 1) & 0xFFFF
        self._recv_seq[src] = nxt

    def _accept(self, src, kind, elen, ctx, tag, raw):
        if kind == EAGER:
            item = (EAGER, raw[ENVELOPE_BYTES:ENVELOPE_BYTES + elen])
            env = Envelope(src, tag, ctx, elen)
        else:
            size, msg_id = _RTS.unpack_from(raw, ENVELOPE_BYTES)
            item = (RTS, msg_id)
            env = Envelope(src, tag, ctx, size)
        for i, pending in enumerate(self._posted):
            if pending.matches(env):
                del self._posted[i]
                self._deliver(pending, env, item)
                return
        self._unexpected.append((env, item))

    def _deliver(self, pending, env, item):
        kind, val = item
        if kind == EAGER:
            pending.req.succeed(val)
            return
        msg_id = val
        self.sim.process(self._send_cts(env, msg_id, pending.req))

    def _send_cts(self, env, msg_id, req):
        yield from self.cpu(ns(self.cluster.costs.ctl_ns))
        self._ids += 1
        buf = self.alloc_buffer(env.size)
        notif = self.gva(NOTIF_BASE + (self._ids % (1 << 20)) * 8)
        key = (notif.node, notif.rank, notif.va)
        self._rdv_recv[key] = (req, env, buf, msg_id)
        self.cluster.notif_owner[key] = self
        self._post(env.src, bytes([CTS]) + _CTS.pack(msg_id, self.gva(buf).to_bytes(),
                                                     notif.to_bytes()))

    def _start_rdma(self, msg_id, rbuf, notif):
        _, dst, buf, size = self._rdv_send[msg_id]
        rdma = self.cluster.rdma
        ch = rdma.free_write_channel(self.node, self.page)
        if ch is None:
            self._wait_chan.append((msg_id, rbuf, notif))
            return
        desc = RdmaDescriptor(self.gva(buf).node_va, rbuf, size, notif, ch, self.page)
        rdma.rdma_write(self.node, self.page, ch, desc, on_complete=self._rdma_done)

    def _rdma_done(self, xfer):
        if xfer.status != "complete":
            self.cluster.errors.append((self.rank, xfer.dst, xfer.status))
        if self._wait_chan:
            self._start_rdma(*self._wait_chan.popleft())

    def _on_notify(self, key):
        self._notes.append(key)
        self._wake()

    def _rdv_complete(self, key):
        req, env, buf, msg_id = self._rdv_recv.pop(key)
        del self.cluster.notif_owner[key]
        data = env.size
        if self.cluster.move_bytes:
            data = self.cluster.rdma.memories[self.node].read(self.gva(buf).node_va, env.size)
        self._post(env.src, bytes([FIN]) + _FIN.pack(msg_id))
        req.succeed(data)


class Cluster:
    """One simulated machine with ``n_ranks`` MPI-like processes."""

    def __init__(self, n_ranks: int, dims=None, params: CalibrationParams = DEFAULT_PARAMS,
                 costs: RuntimeCosts | None = None, ranks_per_fpga: int = 4, seed: int = 0,
                 loss_rate: float = 0.0, trace: bool = False, move_bytes: bool = True,
                 pdid: int = DEFAULT_PDID):
        if dims is None:
            dims = minimal_dims(n_ranks, ranks_per_fpga)
        self.sim = Simulator()
        self.topology = Topology(dims)
        self.params = params
        self.costs = costs or RuntimeCosts()
        self.n_ranks = n_ranks
        self.placement = RankMap(self.topology, n_ranks, ranks_per_fpga)
        self.trace = [] if trace else None
        self.fabric = Fabric(self.sim, self.topology, params, self.trace)
        self.endpoints = Endpoints(self.fabric, params, LossInjector(loss_rate, seed), self.trace)
        self.rdma = RdmaEngine(self.endpoints, params, move_bytes=move_bytes)
        self.move_bytes = move_bytes
        self.pdid = pdid
        self.errors: list = []
        self.notif_owner: dict = {}
        self._fence = None
        self.ranks = [Rank(self, r) for r in range(n_ranks)]
        self._by_core = {(rk.node, rk.iface): rk.rank for rk in self.ranks}
        self.rdma.notify_hooks.append(self._notify)

    def align(self, rank: Rank, guard_ns: float = 20_000.0, participants: int | None = None):
        """Timing fence: every participant resumes at (last arrival + guard).

        Benchmarks call it after a real barrier so the timed operation starts
        on a quiet network with all ranks released at the same instant.
        """
        want = self.n_ranks if participants is None else participants
        if self._fence is None:
            self._fence = [0, self.sim.event()]
        fence = self._fence
        fence[0] += 1
        if fence[0] == want:
            self._fence = None
            self.sim.schedule(ns(guard_ns), fence[1].succeed)
        yield fence[1]

    def rank_of(self, node: int, iface: int) -> int:
        return self._by_core[(node, iface)]

    def _notify(self, xfer):
        n = xfer.desc.notif_gva
        if n is None:
            return
        key = (n.node, n.rank, n.va)
        owner = self.notif_owner.get(key)
        if owner is not None:
            owner._on_notify(key)

    def run(self, program, *args, ranks=None) -> list:
        """Run ``program(rank, *args)`` on every rank (or the given subset) to completion."""
        ranks = self.ranks if ranks is None else [self.ranks[r] for r in ranks]
        procs = [self.sim.process(program(rk, *args), f"rank{rk.rank}") for rk in ranks]
        self.fabric.advance()
        stuck = [p.name for p in procs if not p.triggered]
        if stuck:
            raise RuntimeError(f"ranks did not finish: {stuck[:8]}")
        return [p.value for p in procs]


def minimal_dims(n_ranks: int, ranks_per_fpga: int = 4) -> tuple[int, int, int]:
    """Smallest prefix of the (4,4,2) prototype that holds the ranks in block placement."""
    qfdbs = -(-n_ranks // (ranks_per_fpga * FPGAS_PER_QFDB))
    if qfdbs <= 4:
        return (max(1, qfdbs), 1, 1)
    if qfdbs <= 16:
        return (4, -(-qfdbs // 4), 1)
    if qfdbs <= 32:
        return (4, 4, 2)
    raise ValueError(f"{n_ranks} ranks exceed the 128-FPGA prototype")


__all__ = ["ANY_SOURCE", "ANY_TAG", "Cluster", "Envelope", "Rank", "RankMap", "RuntimeCosts",
           "minimal_dims"]
