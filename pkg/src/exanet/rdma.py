"""RDMA engine: block-segmented writes with end-to-end block ACKs, reads, and fault replay.

A transfer is split into 16 KiB blocks. Each block is acknowledged (or
NACKed) by the destination on its own; a lost block or lost ACK times out and
only that block is sent again. The completion notification travels as the
last cell of the last block and is written only after every block has landed.
"""
from __future__ import annotations

import struct
from collections import OrderedDict, deque
from dataclasses import dataclass

from .endpoints import Endpoints, mailbox_address
from .fabric import Frame, segment_payload
from .gvas import GlobalVirtualAddress, Protection, check_protection
from .latmodel import CalibrationParams
from .sim import ns, ser_ps

PAGE_SIZE = 4096
N_PAGES = 16
WRITE_CHANNELS = 32
READ_CHANNELS = 32
READ_IFACE = 63  # mailbox reserved for incoming read requests
DESCRIPTOR_BYTES = 64


class ChannelBusy(RuntimeError):
    pass


class PdidMismatch(PermissionError):
    pass


class PageFault(Exception):
    def __init__(self, node_va: int):
        super().__init__(f"page fault at {node_va:#x}")
        self.node_va = node_va


_DESC = struct.Struct(">Q10sQ10sBHBB23x")
_READ_REQ = struct.Struct(">Q10sQ10sQ")


@dataclass(frozen=True)
class RdmaDescriptor:
    src_va: int
    dst_gva: GlobalVirtualAddress
    size: int
    notif_gva: GlobalVirtualAddress | None = None
    channel: int = 0
    page: int = 0

    def __post_init__(self):
        if not 0 <= self.src_va < 1 << 42:
            raise ValueError("src_va out of range")
        if self.size < 0:
            raise ValueError("size must be >= 0")

    def to_bytes(self) -> bytes:
        notif = self.notif_gva.to_bytes() if self.notif_gva else bytes(10)
        return _DESC.pack(self.src_va, self.dst_gva.to_bytes(), self.size, notif,
                          self.notif_gva is not None, self.channel, self.page, 0)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RdmaDescriptor":
        src, dst, size, notif, has_notif, chan, page, _ = _DESC.unpack(raw)
        return cls(src, GlobalVirtualAddress.from_bytes(dst), size,
                   GlobalVirtualAddress.from_bytes(notif) if has_notif else None, chan, page)


assert _DESC.size == DESCRIPTOR_BYTES


class NodeMemory:
    """Sparse byte-addressable memory over node-level virtual addresses (rank | va)."""

    def __init__(self):
        self.pages: dict[int, bytearray] = {}
        self.owners: dict[int, int] = {}  # rank -> pdid
        self.non_resident: set[int] = set()  # page numbers that fault on first touch

    def write(self, addr: int, data) -> None:
        mv = memoryview(data)
        pos = 0
        while pos < len(mv):
            page, off = divmod(addr + pos, PAGE_SIZE)
            n = min(PAGE_SIZE - off, len(mv) - pos)
            buf = self.pages.get(page)
            if buf is None:
                buf = self.pages[page] = bytearray(PAGE_SIZE)
            buf[off:off + n] = mv[pos:pos + n]
            pos += n

    def read(self, addr: int, size: int) -> bytes:
        out = bytearray(size)
        pos = 0
        while pos < size:
            page, off = divmod(addr + pos, PAGE_SIZE)
            n = min(PAGE_SIZE - off, size - pos)
            buf = self.pages.get(page)
            if buf is not None:
                out[pos:pos + n] = buf[off:off + n]
            pos += n
        return bytes(out)


class Smmu:
    """LRU TLB in front of per-node page tables; non-resident pages fault."""

    def __init__(self, entries: int = 64, walk_ps: int = 0):
        self.entries = entries
        self.walk_ps = walk_ps
        self.tlb: OrderedDict = OrderedDict()
        self.frames: dict = {}
        self.hits = 0
        self.misses = 0

    def translate(self, memory: NodeMemory, pdid: int, node_va: int) -> tuple[int, int]:
        """(physical frame, extra latency in ps) or PageFault."""
        page = node_va // PAGE_SIZE
        key = (pdid, page)
        if key in self.tlb:
            self.tlb.move_to_end(key)
            self.hits += 1
            return self.tlb[key], 0
        if page in memory.non_resident:
            raise PageFault(node_va)
        self.misses += 1
        frame = self.frames.setdefault(key, len(self.frames))
        self.tlb[key] = frame
        if len(self.tlb) > self.entries:
            self.tlb.popitem(last=False)
        return frame, self.walk_ps


@dataclass
class RdmaPage:
    page_id: int
    owner_pdid: int

    def __post_init__(self):
        self.write_busy = [False] * WRITE_CHANNELS
        self.read_busy = [False] * READ_CHANNELS


class Block:
    __slots__ = ("idx", "offset", "length", "status", "retries", "attempt", "frames")

    def __init__(self, idx, offset, length):
        self.idx = idx
        self.offset = offset
        self.length = length
        self.status = "pending"
        self.retries = 0
        self.attempt = 0
        self.frames = None  # [(offset, n_bytes, cell sizes, is_notif)]


class Transfer:
    def __init__(self, tid, src, dst, pdid, desc, on_complete, kind="write"):
        self.id = tid
        self.src = src
        self.dst = dst
        self.pdid = pdid
        self.desc = desc
        self.size = desc.size
        self.kind = kind
        self.on_complete = on_complete
        self.status = "pending"
        self.blocks: list[Block] = []
        self.acked = 0
        self.data = b""
        self.start_ps = 0
        self.done_ps = None
        self.release = None
        self.read_id = None

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


class _Stream:
    __slots__ = ("xfer", "blocks", "fi", "next_t")

    def __init__(self, xfer, blocks, t):
        self.xfer = xfer
        self.blocks = deque(blocks)
        self.fi = 0
        self.next_t = t


class _RxState:
    __slots__ = ("received", "done", "nacked", "complete")

    def __init__(self):
        self.received: dict[int, set] = {}
        self.done: set = set()
        self.nacked: set = set()
        self.complete = False


class _NodeEngine:
    def __init__(self):
        self.streams: list[_Stream] = []
        self.next_free = 0
        self.wake_at = -1
        self.r5_free = 0
        self.pages: list[RdmaPage | None] = [None] * N_PAGES
        self.read_in_use = 0


class ReadHandle:
    def __init__(self, rid, node, on_complete):
        self.id = rid
        self.node = node
        self.on_complete = on_complete
        self.status = "pending"
        self.done_ps = None
        self.retries = 0


class RdmaEngine:
    MAX_BACKLOG = 2  # frames waiting at the first link per node
    MAX_BLOCK_RETRIES = 10_000

    def __init__(self, endpoints: Endpoints, params: CalibrationParams, move_bytes: bool = True,
                 read_channels: int = READ_CHANNELS, read_retry_ns: float = 1000.0):
        self.ep = endpoints
        self.fabric = endpoints.fabric
        self.sim = endpoints.sim
        self.params = params
        self.move_bytes = move_bytes
        self.read_channels = read_channels
        self.read_retry_ps = ns(read_retry_ns)
        n = self.fabric.topology.n_nodes
        self.nodes = [_NodeEngine() for _ in range(n)]
        self.memories = [NodeMemory() for _ in range(n)]
        self.smmus = [Smmu(params.tlb_entries, ns(params.tlb_walk_ns)) for _ in range(n)]
        self.chan_rate = params.rdma_rate_gbps * 1e9
        self.peak_rate = params.engine_peak_gbps * 1e9
        self.fw_ps = ns(params.firmware_overhead_ns)
        self.timeout_ps = ns(params.block_ack_timeout_ns)
        self.fault_ps = ns(params.fault_service_ns)
        self._ids = 0
        self._rx: dict[int, _RxState] = {}
        self._reads: dict[int, ReadHandle] = {}
        self.notify_hooks: list = []
        self.log: list[tuple] = []  # (t_ps, event, transfer id, detail)
        self.trace = endpoints.trace
        for kind, fn in (("rdma", self._rx_data), ("back", self._rx_block_ack),
                         ("bnack", self._rx_block_nack)):
            endpoints.register_kind(kind, fn)
        self._read_ifaces = set()
        self.fabric.launch_listeners.append(self._launched)

    # --- setup ------------------------------------------------------------
    def register_process(self, node: int, rank: int, pdid: int):
        self.memories[node].owners[rank] = pdid
        if node not in self._read_ifaces:
            self.ep.alloc_mailbox(node, 0, READ_IFACE, validator=self._validate_read)
            self.ep.mailbox(node, READ_IFACE).on_arrival = self._serve_read
            self._read_ifaces.add(node)

    def alloc_page(self, node: int, pdid: int) -> int:
        pages = self.nodes[node].pages
        for i, p in enumerate(pages):
            if p is None:
                pages[i] = RdmaPage(i, pdid)
                return i
        raise RuntimeError(f"no free RDMA page on node {node}")

    def free_write_channel(self, node: int, page: int):
        busy = self.nodes[node].pages[page].write_busy
        for i, b in enumerate(busy):
            if not b:
                return i
        return None

    def transaction_overhead(self) -> float:
        """Firmware cost per invocation, in seconds."""
        return self.params.firmware_overhead_ns * 1e-9

    def translate(self, node: int, pdid: int, node_va: int) -> tuple[int, int]:
        return self.smmus[node].translate(self.memories[node], pdid, node_va)

    # --- firmware (R5) ----------------------------------------------------
    def _r5(self, node: int, fn, *args):
        eng = self.nodes[node]
        start = max(self.sim.now, eng.r5_free)
        eng.r5_free = start + self.fw_ps
        self.sim.at(eng.r5_free, fn, *args)

    def _log(self, event, xfer, detail=""):
        self.log.append((self.sim.now, event, xfer.id, detail))
        if self.trace is not None:
            self.trace.append(f"{self.sim.now / 1000:.3f}\t{event}\t{xfer.src}\t{xfer.dst}\t{xfer.id}\t{detail}")

    # --- writes -----------------------------------------------------------
    def rdma_write(self, node: int, page: int, channel: int, desc: RdmaDescriptor,
                   on_complete=None) -> Transfer:
        pg = self.nodes[node].pages[page]
        if pg is None:
            raise ValueError(f"RDMA page {page} on node {node} is not allocated")
        if pg.write_busy[channel]:
            raise ChannelBusy(f"write channel {channel} of page {page} is busy")
        pg.write_busy[channel] = True
        xfer = self._new_transfer(node, desc, pg.owner_pdid, on_complete)

        def release():
            pg.write_busy[channel] = False
        xfer.release = release
        self._r5(node, self._start, xfer)
        return xfer

    def _new_transfer(self, node, desc, pdid, on_complete, kind="write"):
        self._ids += 1
        xfer = Transfer(self._ids, node, desc.dst_gva.node, pdid, desc, on_complete, kind)
        xfer.start_ps = self.sim.now
        return xfer

    def _start(self, xfer: Transfer):
        p = self.params
        if xfer.status != "pending":
            return
        xfer.status = "active"
        self._log("start", xfer, str(xfer.size))
        if self.move_bytes and xfer.size:
            xfer.data = self.memories[xfer.src].read(xfer.desc.src_va, xfer.size)
        k = self.fabric.max_frame_cells(xfer.src, xfer.dst)
        n_blocks = max(1, -(-xfer.size // p.block_bytes))
        for b in range(n_blocks):
            off = b * p.block_bytes
            blk = Block(b, off, min(p.block_bytes, xfer.size - off))
            frames = []
            cells = segment_payload(blk.length) if blk.length else []
            pos = off
            for i in range(0, len(cells), k):
                group = cells[i:i + k]
                frames.append((pos, sum(group), group, False))
                pos += sum(group)
            if b == n_blocks - 1:
                frames.append((xfer.size, 0, [p.notification_bytes], True))
            blk.frames = frames
            xfer.blocks.append(blk)
        for blk in xfer.blocks:
            blk.status = "in_flight"
        self._add_stream(xfer, xfer.blocks)

    def _add_stream(self, xfer, blocks):
        eng = self.nodes[xfer.src]
        eng.streams.append(_Stream(xfer, blocks, self.sim.now))
        self._pump(xfer.src)

    def _pump(self, node: int):
        eng = self.nodes[node]
        sim = self.sim
        fabric = self.fabric
        while eng.streams and fabric.backlog[node] < self.MAX_BACKLOG:
            now = sim.now
            best = min(eng.streams, key=lambda s: s.next_t)
            t = max(best.next_t, eng.next_free)
            if t > now:
                if not now < eng.wake_at <= t:
                    eng.wake_at = t
                    sim.at(t, self._pump, node)
                return
            xfer = best.xfer
            if xfer.status != "active":
                eng.streams.remove(best)
                continue
            blk = best.blocks[0]
            off, nbytes, cells, is_notif = blk.frames[best.fi]
            frame = Frame(node, xfer.dst, cells, "rdma",
                          (xfer, blk.idx, blk.attempt, best.fi, off, nbytes, is_notif))
            fabric.send(frame, self.ep._rx)
            wire_payload = sum(cells)
            best.next_t = now + ser_ps(wire_payload, self.chan_rate)
            eng.next_free = now + ser_ps(wire_payload, self.peak_rate)
            best.fi += 1
            if best.fi == len(blk.frames):
                sim.schedule(self.timeout_ps, self._block_timeout, xfer, blk, blk.attempt)
                best.blocks.popleft()
                best.fi = 0
                if not best.blocks:
                    eng.streams.remove(best)

    def _launched(self, frame):
        if self.nodes[frame.src].streams:
            self._pump(frame.src)

    def _replay(self, xfer: Transfer, blk: Block):
        if xfer.status != "active" or blk.status == "acked":
            return
        blk.retries += 1
        if blk.retries > self.MAX_BLOCK_RETRIES:
            self._complete(xfer, "failed")
            return
        blk.attempt += 1
        blk.status = "in_flight"
        self._log("replay", xfer, f"block{blk.idx}")
        self._add_stream(xfer, [blk])

    def _block_timeout(self, xfer, blk, attempt):
        if blk.status == "in_flight" and blk.attempt == attempt and xfer.status == "active":
            self._replay(xfer, blk)

    def _rx_block_ack(self, frame: Frame):
        xfer, bi, _ = frame.body
        blk = xfer.blocks[bi]
        if blk.status == "acked" or xfer.status != "active":
            return
        blk.status = "acked"
        self._log("block_ack", xfer, f"block{bi}")
        self._r5(xfer.src, self._block_done, xfer)

    def _block_done(self, xfer):
        xfer.acked += 1
        if xfer.acked == xfer.n_blocks and xfer.status == "active":
            self._complete(xfer, "complete")

    def _rx_block_nack(self, frame: Frame):
        xfer, bi, attempt, reason = frame.body
        if xfer.status != "active":
            return
        blk = xfer.blocks[bi]
        if reason == "pdid_mismatch":
            self._complete(xfer, "nacked")
            return
        if blk.attempt == attempt and blk.status == "in_flight":
            blk.status = "faulted"
            self._log("fault", xfer, f"block{bi}")
            self.sim.schedule(self.fault_ps, self._replay, xfer, blk)

    def _complete(self, xfer, status):
        xfer.status = status
        xfer.done_ps = self.sim.now
        self._log("complete", xfer, status)
        if xfer.release:
            xfer.release()
        if xfer.on_complete:
            xfer.on_complete(xfer)

    # --- destination side -------------------------------------------------
    def _send_ctl(self, xfer, kind, body):
        self.fabric.send(Frame(xfer.dst, xfer.src, [0], kind, body), self.ep._rx)

    def _rx_data(self, frame: Frame):
        xfer, bi, attempt, fi, off, nbytes, is_notif = frame.body
        rx = self._rx.get(xfer.id)
        if rx is None:
            rx = self._rx[xfer.id] = _RxState()
        mem = self.memories[xfer.dst]
        dst = xfer.desc.dst_gva
        owner = mem.owners.get(dst.rank)
        if owner is None or check_protection(xfer.pdid, owner) is Protection.REJECT:
            if (bi, attempt) not in rx.nacked:
                rx.nacked.add((bi, attempt))
                self._send_ctl(xfer, "bnack", (xfer, bi, attempt, "pdid_mismatch"))
            return
        delay = 0
        got = rx.received.setdefault(bi, set())
        if nbytes and bi not in rx.done and fi not in got:
            # duplicates from a replay are acknowledged but never rewritten
            base = dst.node_va + off
            smmu = self.smmus[xfer.dst]
            try:
                for page in range(base // PAGE_SIZE, (base + nbytes - 1) // PAGE_SIZE + 1):
                    delay += smmu.translate(mem, xfer.pdid, page * PAGE_SIZE)[1]
            except PageFault as fault:
                if (bi, attempt) not in rx.nacked:
                    rx.nacked.add((bi, attempt))
                    self._log("page_fault", xfer, f"block{bi}")
                    # the OS maps the page; the source replays after the same delay
                    self.sim.schedule(self.fault_ps, mem.non_resident.discard,
                                      fault.node_va // PAGE_SIZE)
                    self._send_ctl(xfer, "bnack", (xfer, bi, attempt, "page_fault"))
                return
            if self.move_bytes:
                mem.write(base, xfer.data[off:off + nbytes])
            self._log("write", xfer, f"{off}+{nbytes}")
        got.add(fi)
        blk = xfer.blocks[bi]
        if len(got) < len(blk.frames):
            return
        if bi not in rx.done:
            rx.done.add(bi)
            if len(rx.done) == xfer.n_blocks:
                self._notify(xfer, rx)
        elif fi != len(blk.frames) - 1:
            return
        if delay:
            self.sim.schedule(delay, self._send_ctl, xfer, "back", (xfer, bi, attempt))
        else:
            self._send_ctl(xfer, "back", (xfer, bi, attempt))

    def _notify(self, xfer: Transfer, rx: _RxState):
        rx.complete = True
        notif = xfer.desc.notif_gva
        if notif is not None:
            self.memories[notif.node].write(notif.node_va, struct.pack(">Q", xfer.size))
        self._log("notify", xfer, "")
        if xfer.read_id is not None:
            h = self._reads.pop(xfer.read_id, None)
            if h is not None:
                h.status = "complete"
                h.done_ps = self.sim.now
                if h.on_complete:
                    h.on_complete(h)
        for hook in self.notify_hooks:
            hook(xfer)

    # --- reads ------------------------------------------------------------
    def rdma_read(self, node: int, pdid: int, remote_src: GlobalVirtualAddress,
                  local_dst: GlobalVirtualAddress, size: int,
                  notif_gva: GlobalVirtualAddress | None = None, on_complete=None) -> ReadHandle:
        self._ids += 1
        h = ReadHandle(self._ids, node, on_complete)
        self._reads[h.id] = h
        req = _READ_REQ.pack(remote_src.node_va, local_dst.to_bytes(), size,
                             (notif_gva or local_dst).to_bytes(), h.id)
        flags = notif_gva is not None
        dst = mailbox_address(pdid, remote_src.node, READ_IFACE, remote_src.rank)

        def sent(txn):
            if txn.state.value == "acknowledged":
                return
            if txn.reason == "no_read_channel":
                h.retries += 1
                self.sim.schedule(self.read_retry_ps, issue)
                return
            self._reads.pop(h.id, None)
            h.status = "nacked" if txn.reason == "pdid_mismatch" else "failed"
            h.done_ps = self.sim.now
            if h.on_complete:
                h.on_complete(h)

        def issue():
            self.ep.transmit(node, ("rdma-read", node), dst, req + bytes([flags]), pdid, sent)
        issue()
        return h

    def _validate_read(self, pkt):
        mem = self.memories[pkt.dst.node]
        owner = mem.owners.get(pkt.dst.rank)
        if owner is None or check_protection(pkt.pdid, owner) is Protection.REJECT:
            return "pdid_mismatch"
        if self.nodes[pkt.dst.node].read_in_use >= self.read_channels:
            return "no_read_channel"
        return None

    def _serve_read(self, mb):
        msg = mb.queue.popleft()
        src_va, dst_raw, size, notif_raw, rid = _READ_REQ.unpack(msg.payload[:_READ_REQ.size])
        has_notif = msg.payload[_READ_REQ.size]
        dst = GlobalVirtualAddress.from_bytes(dst_raw)
        eng = self.nodes[mb.node]
        eng.read_in_use += 1
        desc = RdmaDescriptor(src_va, dst, size,
                              GlobalVirtualAddress.from_bytes(notif_raw) if has_notif else None)
        xfer = self._new_transfer(mb.node, desc, dst.pdid, None, kind="read")
        xfer.read_id = rid

        def release():
            eng.read_in_use -= 1
        xfer.release = release
        self._r5(mb.node, self._start, xfer)
