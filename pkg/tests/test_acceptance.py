"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The lines are repeated in the pytest terminal summary under "acceptance criteria".
"""
import os
import random
import struct
from dataclasses import replace

import numpy as np
import pytest

from exanet.collectives import allreduce, bcast, tree_fold
from exanet.endpoints import ChannelState, Endpoints, LossInjector, mailbox_address
from exanet.fabric import DeadlockDetected, Fabric, Frame, segment_payload
from exanet.gvas import GlobalVirtualAddress, pack_address, unpack_address
from exanet.harness import bench, compare
from exanet.harness.cli import main as cli_main
from exanet.harness.scenario import Scenario, load
from exanet.latmodel import DEFAULT_PARAMS
from exanet.rdma import PAGE_SIZE, RdmaDescriptor, RdmaEngine
from exanet.runtime import Cluster
from exanet.sim import Simulator
from exanet.topology import Topology

SCN = os.path.join(os.path.dirname(__file__), "..", "scenarios")


def within(value, target, rel):
    return abs(value - target) <= rel * abs(target)


def test_path_latency_composition(criterion):
    rows = {r.paper_ref: r for r in bench.run(load(os.path.join(SCN, "table2.scn")))}
    model = {(r.paper_ref, r.metric): r for r in compare.compare()}
    flagged = {r.paper_ref for r in compare.flagged(model.values()) if r.metric == "model_vs_paper"}
    a, b, e = (rows[k].value for k in ("lat0.intra_qfdb_sh", "lat0.intra_mezz_sh",
                                       "lat0.inter_mezz_312"))
    gap = model[("lat0.inter_mezz_312", "paper_vs_model")].deviation_pct
    checks = [
        (f"Intra-QFDB-sh {a:.3f} us vs 1.293 (2%)", within(a, 1.293, 0.02)),
        (f"Intra-mezz-sh {b:.3f} us vs 1.579 (2%)", within(b, 1.579, 0.02)),
        (f"Inter-mezz(3,1,2) {e:.3f} us vs model 2.615 (3%)", within(e, 2.615, 0.03)),
        (f"compare gap {gap:+.1f}% vs -2.3%", round(gap, 1) == -2.3),
    ]
    for rid in ("lat0.intra_mezz_mh2", "lat0.intra_mezz_mh3"):
        dev = model[(rid, "model_vs_paper")].deviation_pct
        checks.append((f"{rid} flagged at {dev:+.1f}% (<=15%)", rid in flagged and abs(dev) <= 15))
    worst = max(abs(r.value - r.model_value) / r.model_value for r in rows.values())
    checks.append((f"sim vs model worst {worst * 100:.2f}% (1%)", worst <= 0.01))
    criterion("1 path-latency composition", checks)


def test_bandwidth_saturation(criterion):
    bw = {r.path_class: r.value for r in bench.run(load(os.path.join(SCN, "bw.scn")))}
    bibw = {r.path_class: r.value for r in bench.run(load(os.path.join(SCN, "bibw.scn")))}
    q, m = bw["Intra-QFDB-sh"], bw["Intra-mezz-sh"]
    checks = [(f"intra-QFDB bw {q:.2f} Gb/s vs 13.104 (3%)", within(q, 13.104, 0.03)),
              (f"external bw {m:.2f} Gb/s vs 6.42 (5%)", within(m, 6.42, 0.05))]
    for cls in bw:
        ratio = bibw[cls] / bw[cls]
        checks.append((f"{cls} bibw/bw {ratio:.2f} (>=1.85)", ratio >= 1.85))
    criterion("2 bandwidth saturation", checks)


def test_broadcast_model(criterion):
    scn = Scenario(name="bcast", benchmark="bcast", n_ranks=(16, 64, 512),
                   sizes=(1, 4096, 512 << 10), iterations=2, warmup=0, repetitions=2).validate()
    checks = []
    for r in bench.run(scn):
        dev = abs(r.value - r.model_value) / r.value
        checks.append((f"N={r.n_ranks} {r.size_bytes}B {dev * 100:.1f}%", dev <= 0.12))
    counts = bench.bcast_counts(512, 4)
    checks.append((f"512-rank counts {counts}", counts == (2, 2, 5)))
    criterion("3 broadcast model (12%)", checks)


def test_accelerated_allreduce(criterion):
    scn = load(os.path.join(SCN, "allreduce_accel.scn"))
    rows = bench.run(scn)
    sw = {r.n_ranks: r.value for r in rows if r.benchmark == "allreduce"}
    hw = {r.n_ranks: r.value for r in rows if r.metric == "latency_us" and r.path_class == "accel"}
    red = {r.n_ranks: r.value for r in rows if r.metric == "reduction_pct"}
    checks = [(f"accel 16r {hw[16]:.2f} us vs 6.79 (10%)", within(hw[16], 6.79, 0.10)),
              (f"accel 128r/16r {hw[128] / hw[16]:.2f} (<=1.5)", hw[128] <= 1.5 * hw[16]),
              (f"software 128r/16r {sw[128] / sw[16]:.3f} (>=1.8)", sw[128] >= 1.8 * sw[16])]
    checks += [(f"reduction {n}r {red[n]:.1f}% (>=80)", red[n] >= 80) for n in (16, 32, 64, 128)]
    grow = bench.run(replace(scn, benchmark="allreduce_accel", accel=False, n_ranks=(16,),
                             sizes=(256, 512, 1024)))
    lat = [r.value for r in grow]
    for i in (1, 2):
        ratio = lat[i] / lat[i - 1]
        checks.append((f"{256 << i}B/{256 << (i - 1)}B {ratio:.3f} (2 +-5%)", within(ratio, 2, 0.05)))
    criterion("4 accelerated allreduce", checks)


SMALL = Topology((2, 1, 1))
SRC_VA, DST_VA, NOTIF_VA = 0x10000, 0x40000, 0x9000


def reliability_run(seed: int) -> dict:
    """One randomized small scenario: packets with loss, a foreign PDID, small mailboxes, one RDMA write."""
    rng = random.Random(seed)
    params = DEFAULT_PARAMS.with_overrides(mailbox_capacity=rng.choice([1, 2, 4, 256]))
    sim = Simulator()
    fab = Fabric(sim, SMALL, params)
    ep = Endpoints(fab, params, LossInjector(rng.uniform(0.0, 0.1), seed))
    eng = RdmaEngine(ep, params)
    nodes = rng.sample(range(SMALL.n_nodes), 3)
    foreign = nodes[2]  # its mailbox belongs to another protection domain
    for x in nodes:
        ep.alloc_mailbox(x, 2 if x == foreign else 1, 0)
    received = {x: [] for x in nodes}
    sent, refused, full = {}, [], []

    def drain():
        for x in nodes:
            while (m := ep.mbox_dequeue(x, 0)) is not None:
                received[x].append(m.payload)

    def done(txn, src, dst, payload):
        if txn.state is ChannelState.TIMED_OUT:
            ep.resume(txn)
        elif txn.state is ChannelState.NEGATIVELY_ACKNOWLEDGED:
            if txn.reason == "mailbox_full":
                full.append(payload)
                sim.schedule(2_000_000, post, src, dst, payload)
            else:
                refused.append((payload, txn.reason))

    def post(src, dst, payload):
        ep.transmit(src, ("user", src), mailbox_address(1, dst, 0), payload, 1,
                    lambda t: done(t, src, dst, payload))

    for i in range(rng.randint(2, 6)):
        src, dst = rng.choice(nodes), rng.choice(nodes)
        payload = struct.pack(">HI", seed & 0xFFFF, i)
        sent[payload] = dst
        post(src, dst, payload)
    s, d = nodes[0], nodes[1]
    for x in (s, d):
        eng.register_process(x, 0, 1)
    size = rng.randint(1, 40_000)
    data = rng.randbytes(size)
    eng.memories[s].write(SRC_VA, data)
    if rng.random() < 0.5:
        eng.memories[d].non_resident.add((DST_VA + rng.randrange(size)) // PAGE_SIZE)
    desc = RdmaDescriptor(SRC_VA, GlobalVirtualAddress(1, d, 0, DST_VA), size,
                          GlobalVirtualAddress(1, d, 0, NOTIF_VA))
    xfer = eng.rdma_write(s, eng.alloc_page(s, 1), 0, desc)
    for k in range(1, 60):
        sim.schedule(k * 1_000_000, drain)
    fab.advance()
    drain()
    keys = [(node, iface, src, seq) for node, iface, src, seq in ep.enqueue_log]
    writes = [t for t, ev, tid, _ in eng.log if tid == xfer.id and ev == "write"]
    notes = [t for t, ev, tid, _ in eng.log if tid == xfer.id and ev == "notify"]
    want = {x: sorted(p for p, dst in sent.items() if dst == x) for x in nodes if x != foreign}
    return {
        "duplicate": len(keys) != len(set(keys)),
        "lost": any(sorted(received[x]) != want[x] for x in want),
        "foreign": bool(received[foreign]) or any(r != "pdid_mismatch" for _, r in refused)
                   or len(refused) != sum(dst == foreign for dst in sent.values()),
        "rdma": xfer.status != "complete" or eng.memories[d].read(DST_VA, size) != data
                or struct.unpack(">Q", eng.memories[d].read(NOTIF_VA, 8))[0] != size,
        "order": len(notes) != 1 or any(t > notes[0] for t in writes),
        "faulted": any(ev == "page_fault" for _, ev, tid, _ in eng.log if tid == xfer.id),
        "nack_full": bool(full),
    }


def test_reliability(criterion):
    bad = {k: 0 for k in ("duplicate", "lost", "foreign", "rdma", "order")}
    seen = {"faulted": 0, "nack_full": 0}
    runs = 10_000
    for seed in range(runs):
        res = reliability_run(seed)
        for k in bad:
            bad[k] += res[k]
        for k in seen:
            seen[k] += res[k]
    checks = [(f"{k} violations {v}/{runs}", v == 0) for k, v in bad.items()]
    checks += [(f"runs with page faults {seen['faulted']}", seen["faulted"] > 0),
               (f"runs with full-mailbox NACKs {seen['nack_full']}", seen["nack_full"] > 0)]
    criterion("5 reliability under loss, PDID mismatch, full mailboxes, page faults", checks)


def test_fabric_properties(criterion):
    drops = over = fifo = 0
    worst = 0
    for seed in range(20):
        rng = random.Random(seed)
        sim = Simulator()
        fab = Fabric(sim, Topology((4, 4, 2)), DEFAULT_PARAMS)
        order = {}
        for _ in range(600):
            s, d = rng.randrange(128), rng.randrange(128)
            k = fab.max_frame_cells(s, d)
            frame = Frame(s, d, segment_payload(rng.randrange(0, k * 256 + 1))[:k])
            sim.at(rng.randrange(0, 50_000_000), fab.send, frame,
                   lambda f: order.setdefault((f.src, f.dst), []).append(f.seq))
        stats = fab.advance()
        drops += stats.cells_injected - stats.cells_delivered + stats.cells_queued
        occ = max(p.max_occupancy for p in fab.ports.values())
        worst = max(worst, occ)
        over += occ > 4096
        fifo += sum(seqs != sorted(seqs) for seqs in order.values())
    sim = Simulator()
    fab = Fabric(sim, Topology((4, 4, 2)), DEFAULT_PARAMS)
    topo = fab.topology
    got = []
    for q in range(topo.n_qfdbs):
        x, y, z = topo.qfdb_coord(q)
        dst = topo.qfdb_index(((x + 2) % 4, (y + 2) % 4, (z + 1) % 2)) * 4
        for _ in range(50):
            fab.send(Frame(q * 4, dst, [256, 256]), got.append)
    try:
        fab.advance()
        drained = len(got) == topo.n_qfdbs * 50 and fab.check_conservation()
    except DeadlockDetected:
        drained = False
    criterion("6 fabric properties", [
        (f"cell drops {drops} over 20 random-traffic runs", drops == 0),
        (f"max port occupancy {worst} B (<=4096)", over == 0),
        (f"per-flow FIFO violations {fifo}", fifo == 0),
        (f"ring permutation drained {drained}", drained),
    ])


COMBOS = [(op, dt) for op in ("sum", "min", "max") for dt in ("int32", "float32", "float64")]


def oracle_run(seed: int) -> tuple[int, int]:
    """bcast plus all nine allreduce variants on N = seed % 64 + 1 ranks; returns (checked, mismatches)."""
    rng = np.random.default_rng(seed)
    n = seed % 64 + 1
    root = int(rng.integers(n))
    count = int(rng.integers(1, 12))  # up to 88 bytes: eager and rendez-vous both occur
    payload = rng.bytes(int(rng.integers(0, 120)))
    vecs = {}
    for op, dt in COMBOS:
        if dt == "int32":
            vecs[op, dt] = [rng.integers(-2**20, 2**20, count).astype(dt) for _ in range(n)]
        else:
            vecs[op, dt] = [(rng.standard_normal(count) * 10.0 ** rng.integers(-3, 4)).astype(dt)
                            for _ in range(n)]

    def prog(rk):
        out = [(yield from bcast(rk, root, payload if rk.rank == root else None))]
        for combo in COMBOS:
            out.append((yield from allreduce(rk, vecs[combo][rk.rank], combo[0])))
        return out
    results = Cluster(n, seed=seed).run(prog)
    want = [payload] + [tree_fold(vecs[c], c[0]).tobytes() for c in COMBOS]
    bad = 0
    for per_rank in results:
        bad += per_rank[0] != want[0]
        bad += sum(v.tobytes() != w for v, w in zip(per_rank[1:], want[1:]))
    return n * len(want), bad


def bits_oracle(value: int) -> tuple[int, int, int, int]:
    s = f"{value:080b}"
    return int(s[:16], 2), int(s[16:38], 2), int(s[38:41], 2), int(s[41:], 2)


def test_oracle_equivalence(criterion):
    checked = bad = 0
    sizes = set()
    for seed in range(100):
        c, b = oracle_run(seed)
        checked += c
        bad += b
        sizes.add(seed % 64 + 1)
    rng = random.Random(2024)
    gvas_bad = 0
    for _ in range(100_000):
        v = rng.getrandbits(80)
        f = unpack_address(v)
        g = GlobalVirtualAddress(*f)
        gvas_bad += (f != bits_oracle(v) or pack_address(*f) != v
                     or GlobalVirtualAddress.from_bytes(g.to_bytes()) != g)
    # every 16-bit pattern straddling each field boundary
    window_bad = 0
    for boundary in (39, 42, 64):
        for w in range(1 << 16):
            v = w << (boundary - 8)
            f = unpack_address(v)
            window_bad += f != bits_oracle(v) or pack_address(*f) != v
    criterion("7 oracle equivalence", [
        (f"collective results {checked - bad}/{checked} bit-exact over 100 seeds", bad == 0),
        (f"rank counts covered {len(sizes)} (1..64)", sizes == set(range(1, 65))),
        (f"GVAS random round trips 100000, failures {gvas_bad}", gvas_bad == 0),
        (f"GVAS boundary windows 3x65536, failures {window_bad}", window_bad == 0),
    ])


def test_determinism(criterion, tmp_path):
    checks = []
    for name in ("table2", "lossy", "bcast"):
        path = os.path.join(SCN, f"{name}.scn")
        outs = []
        for k in range(2):
            d = str(tmp_path / f"{name}{k}")
            code = cli_main(["run", path, "--out", d, "--seed", "5"])
            csv_bytes = open(os.path.join(d, f"{name}.csv"), "rb").read() if code == 0 else b""
            outs.append((code, csv_bytes))
        same = outs[0] == outs[1] and outs[0][0] == 0
        checks.append((f"{name}.csv byte-identical ({len(outs[0][1])} B)", same))
    criterion("8 determinism", checks)
