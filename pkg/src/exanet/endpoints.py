"""Packetizer / mailbox endpoints for reliable messages of up to 64 bytes.

Every node has 64 packetizer interfaces (4 channels each) and 64 mailbox
interfaces. A packet carries its sender's PDID; the receiving mailbox checks
it, suppresses duplicates by (source, sequence), and answers with an ACK or a
NACK. Lost packets or ACKs are recovered by a hardware timer that resends the
same sequence number.
"""
from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass
from enum import Enum

from .fabric import Fabric, Frame
from .gvas import GlobalVirtualAddress, Protection, check_protection
from .latmodel import CalibrationParams
from .sim import ns

N_INTERFACES = 64
N_CHANNELS = 4
MAX_PAYLOAD = 64


class PayloadTooLarge(ValueError):
    pass


class ChannelBusy(RuntimeError):
    pass


class NotOwner(PermissionError):
    pass


class ChannelState(Enum):
    ONGOING = "ongoing"
    ACKNOWLEDGED = "acknowledged"
    NEGATIVELY_ACKNOWLEDGED = "negatively_acknowledged"
    TIMED_OUT = "timed_out"


def mailbox_of(gva: GlobalVirtualAddress) -> int:
    """Mailbox interface selected by a destination address (bits 12..17 of the VA)."""
    return (gva.va >> 12) & (N_INTERFACES - 1)


def mailbox_address(pdid: int, node: int, iface: int, rank: int = 0) -> GlobalVirtualAddress:
    return GlobalVirtualAddress(pdid, node, rank, iface << 12)


class LossInjector:
    """Drops frames of the selected kinds at the receiving endpoint."""

    def __init__(self, rate: float = 0.0, seed: int = 0, kinds=None):
        if not 0.0 <= rate < 1.0:
            raise ValueError("loss rate must be in [0, 1)")
        self.rate = rate
        self.kinds = None if kinds is None else frozenset(kinds)
        self.rng = random.Random(seed)
        self.dropped = 0

    def drop(self, frame: Frame) -> bool:
        if self.rate == 0.0 or (self.kinds is not None and frame.kind not in self.kinds):
            return False
        if self.rng.random() < self.rate:
            self.dropped += 1
            return True
        return False


@dataclass
class Packet:
    src_node: int
    source: tuple  # sender identity used for duplicate suppression
    seq: int
    pdid: int
    dst: GlobalVirtualAddress
    payload: bytes


@dataclass
class Message:
    src_node: int
    source: tuple
    seq: int
    payload: bytes
    arrived_ps: int


class Transaction:
    """One reliable packet delivery, retried on timeout with the same sequence."""
    __slots__ = ("packet", "state", "retries", "reason", "on_done", "attempt", "sent_ps", "done_ps")

    def __init__(self, packet: Packet, on_done):
        self.packet = packet
        self.state = ChannelState.ONGOING
        self.retries = 0
        self.reason = None
        self.on_done = on_done
        self.attempt = 0
        self.sent_ps = 0
        self.done_ps = None


class Channel:
    __slots__ = ("txn",)

    def __init__(self):
        self.txn = None

    @property
    def state(self):
        """None until the first send, then the state of the latest transaction."""
        return None if self.txn is None else self.txn.state


class PacketizerInterface:
    def __init__(self, iface_id: int, owner_pdid: int):
        self.iface_id = iface_id
        self.owner_pdid = owner_pdid
        self.channels = [Channel() for _ in range(N_CHANNELS)]

    def free_channel(self):
        for i, ch in enumerate(self.channels):
            if ch.state is not ChannelState.ONGOING:
                return i
        return None


class MailboxInterface:
    def __init__(self, iface_id: int, owner_pdid: int, capacity: int, window: int, validator=None,
                 node: int = 0):
        self.iface_id = iface_id
        self.node = node
        self.owner_pdid = owner_pdid
        self.capacity = capacity
        self.window = window
        self.queue: deque[Message] = deque()
        self.seen: dict[tuple, deque] = {}
        self.validator = validator
        self.on_arrival = None
        self.online = True
        self.enqueued = 0

    def is_duplicate(self, source, seq) -> bool:
        recent = self.seen.get(source)
        return recent is not None and seq in recent

    def remember(self, source, seq):
        recent = self.seen.get(source)
        if recent is None:
            recent = self.seen[source] = deque(maxlen=self.window)
        recent.append(seq)


class Endpoints:
    """All packetizers and mailboxes of a fabric, plus the frame receive dispatch."""

    def __init__(self, fabric: Fabric, params: CalibrationParams, loss: LossInjector | None = None,
                 trace=None):
        self.fabric = fabric
        self.sim = fabric.sim
        self.params = params
        self.loss = loss or LossInjector()
        self.trace = trace
        n = fabric.topology.n_nodes
        self.packetizers = [[None] * N_INTERFACES for _ in range(n)]
        self.mailboxes = [[None] * N_INTERFACES for _ in range(n)]
        self.timeout_ps = ns(params.pkt_timeout_ns)
        self.proc_ps = max(0, ns(params.pkt_hw_one_way_ns - params.switch_latency_ns
                                 - params.link_latency_ns))
        self._seq: dict[tuple, int] = {}
        self._pending: dict[tuple, Transaction] = {}
        self._handlers = {"pkt": self._rx_packet, "ack": self._rx_reply, "nack": self._rx_reply}
        self.enqueue_log: list[tuple] = []
        self.stats = {"sent": 0, "retransmits": 0, "acks": 0, "nacks": 0, "duplicates": 0,
                      "timeouts": 0}

    # --- allocation (the kernel's only job) -------------------------------
    def alloc_packetizer(self, node: int, pdid: int, iface: int | None = None) -> int:
        return self._alloc(self.packetizers[node], iface,
                           lambda i: PacketizerInterface(i, pdid))

    def alloc_mailbox(self, node: int, pdid: int, iface: int | None = None, validator=None) -> int:
        p = self.params
        return self._alloc(self.mailboxes[node], iface,
                           lambda i: MailboxInterface(i, pdid, p.mailbox_capacity, p.dedup_window,
                                                      validator, node))

    @staticmethod
    def _alloc(table, iface, make):
        if iface is None:
            iface = next((i for i, v in enumerate(table) if v is None), None)
            if iface is None:
                raise RuntimeError("no free interface")
        if table[iface] is not None:
            raise RuntimeError(f"interface {iface} already allocated")
        table[iface] = make(iface)
        return iface

    def mailbox(self, node: int, iface: int) -> MailboxInterface:
        return self.mailboxes[node][iface]

    def register_kind(self, kind: str, handler):
        self._handlers[kind] = handler

    # --- sender side ------------------------------------------------------
    def pkt_send(self, node: int, iface: int, channel: int, dst: GlobalVirtualAddress,
                 payload: bytes, pdid: int | None = None, on_done=None) -> Transaction:
        pz = self.packetizers[node][iface]
        if pz is None:
            raise NotOwner(f"packetizer {iface} on node {node} is not allocated")
        if pdid is not None and pdid != pz.owner_pdid:
            raise NotOwner(f"PDID {pdid} does not own packetizer {iface}")
        ch = pz.channels[channel]
        if ch.state is ChannelState.ONGOING:
            raise ChannelBusy(f"channel {channel} of packetizer {iface} is busy")
        txn = self.transmit(node, (node, iface, channel), dst, payload, pz.owner_pdid, on_done)
        ch.txn = txn
        return txn

    def pkt_poll(self, node: int, iface: int, channel: int):
        return self.packetizers[node][iface].channels[channel].state

    def transmit(self, node: int, source: tuple, dst: GlobalVirtualAddress, payload: bytes,
                 pdid: int, on_done=None) -> Transaction:
        """Send one reliable packet from ``source``; used by channels and by the RDMA engine."""
        payload = bytes(payload)
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"{len(payload)} > {MAX_PAYLOAD} bytes")
        seq = self._seq.get(source, 0)
        self._seq[source] = seq + 1
        txn = Transaction(Packet(node, source, seq, pdid, dst, payload), on_done)
        txn.sent_ps = self.sim.now
        self._pending[(source, seq)] = txn
        self.stats["sent"] += 1
        self.sim.schedule(self.proc_ps, self._launch, txn)
        return txn

    def _launch(self, txn: Transaction):
        if txn.state is not ChannelState.ONGOING:
            return
        pkt = txn.packet
        frame = Frame(pkt.src_node, pkt.dst.node, [len(pkt.payload)], "pkt", pkt)
        self.fabric.send(frame, self._rx)
        txn.attempt += 1
        self.sim.schedule(self.timeout_ps, self._timeout, txn, txn.attempt)

    def _timeout(self, txn: Transaction, attempt: int):
        if txn.state is not ChannelState.ONGOING or attempt != txn.attempt:
            return
        if txn.retries < self.params.pkt_max_retries:
            txn.retries += 1
            self.stats["retransmits"] += 1
            self._launch(txn)
        else:
            self.stats["timeouts"] += 1
            self._finish(txn, ChannelState.TIMED_OUT, "timeout")

    def _finish(self, txn: Transaction, state: ChannelState, reason=None):
        txn.state = state
        txn.reason = reason
        txn.done_ps = self.sim.now
        self._pending.pop((txn.packet.source, txn.packet.seq), None)
        if txn.on_done is not None:
            txn.on_done(txn)

    # --- receive side -----------------------------------------------------
    def _rx(self, frame: Frame):
        if self.loss.drop(frame):
            if self.trace is not None:
                self.trace.append(f"{self.sim.now / 1000:.3f}\tdrop\t{frame.src}\t{frame.dst}\t{frame.seq}\t{frame.kind}")
            return
        self._handlers[frame.kind](frame)

    def _reply(self, pkt: Packet, kind: str, reason=None):
        frame = Frame(pkt.dst.node, pkt.src_node, [0], kind, (pkt.source, pkt.seq, reason))
        self.fabric.send(frame, self._rx)

    def mbox_deliver(self, pkt: Packet):
        """Check, dedup and enqueue one packet; returns ('ack'|'nack', reason)."""
        mb = self.mailboxes[pkt.dst.node][mailbox_of(pkt.dst)]
        if mb is None or not mb.online:
            return None, "offline"
        if mb.validator is not None:
            reason = mb.validator(pkt)
            if reason is not None:
                return "nack", reason
        elif check_protection(pkt.pdid, mb.owner_pdid) is Protection.REJECT:
            return "nack", "pdid_mismatch"
        if mb.is_duplicate(pkt.source, pkt.seq):
            self.stats["duplicates"] += 1
            return "ack", "duplicate"
        if len(mb.queue) >= mb.capacity:
            return "nack", "mailbox_full"
        mb.remember(pkt.source, pkt.seq)
        msg = Message(pkt.src_node, pkt.source, pkt.seq, pkt.payload, self.sim.now)
        mb.queue.append(msg)
        mb.enqueued += 1
        self.enqueue_log.append((pkt.dst.node, mb.iface_id, pkt.source, pkt.seq))
        if self.trace is not None:
            self.trace.append(f"{self.sim.now / 1000:.3f}\tenqueue\t{pkt.src_node}\t{pkt.dst.node}\t{pkt.seq}\tmbox{mb.iface_id}")
        if mb.on_arrival is not None:
            mb.on_arrival(mb)
        return "ack", None

    def _rx_packet(self, frame: Frame):
        pkt = frame.body
        kind, reason = self.mbox_deliver(pkt)
        if kind is not None:
            self._reply(pkt, kind, reason)

    def _rx_reply(self, frame: Frame):
        source, seq, reason = frame.body
        txn = self._pending.get((source, seq))
        if txn is None or txn.state is not ChannelState.ONGOING:
            return  # stale reply to a finished transaction
        if frame.kind == "ack":
            self.stats["acks"] += 1
            self._finish(txn, ChannelState.ACKNOWLEDGED)
        else:
            self.stats["nacks"] += 1
            self._finish(txn, ChannelState.NEGATIVELY_ACKNOWLEDGED, reason)

    def mbox_dequeue(self, node: int, iface: int):
        mb = self.mailboxes[node][iface]
        return mb.queue.popleft() if mb.queue else None

    def resume(self, txn: Transaction):
        """Re-arm a timed-out transaction with a fresh retry budget, keeping its sequence."""
        if txn.state is not ChannelState.TIMED_OUT:
            raise RuntimeError("only timed-out transactions can be resumed")
        txn.state = ChannelState.ONGOING
        txn.retries = 0
        txn.reason = None
        self._pending[(txn.packet.source, txn.packet.seq)] = txn
        self._launch(txn)
