import random

import pytest
from hypothesis import given, settings, strategies as st

from exanet.calibration import pingpong_latency_ps
from exanet.runtime import ANY_SOURCE, ANY_TAG, Cluster, minimal_dims


def exchange(cluster, payloads, src=0, dst=1):
    got = []

    def prog(rk):
        if rk.rank == src:
            for p in payloads:
                yield from rk.send(dst, p, tag=5)
        elif rk.rank == dst:
            for _ in payloads:
                got.append((yield from rk.recv(src, tag=5)))
    cluster.run(prog, ranks=[src, dst])
    return got


@pytest.mark.parametrize("size", [0, 1, 31, 32, 33, 4096, 70_000])
def test_payload_is_byte_exact(size):
    data = random.Random(size).randbytes(size)
    c = Cluster(8)
    assert exchange(c, [data], 0, 5) == [data]
    kind = "eager" if size <= c.params.eager_threshold else "rendezvous"
    assert c.ranks[0].stats[kind] == 1


def test_messages_do_not_overtake():
    rng = random.Random(3)
    msgs = [rng.randbytes(rng.choice([4, 20, 100, 5000])) for _ in range(12)]
    assert exchange(Cluster(8), msgs, 0, 4) == msgs


def test_wildcards_and_tags():
    out = {}

    def prog(rk):
        if rk.rank == 0:
            a = yield from rk.recv(ANY_SOURCE, tag=7)
            b = yield from rk.recv(2, ANY_TAG)
            out["got"] = {a, b}
        elif rk.rank == 1:
            yield from rk.send(0, b"one", tag=7)
        elif rk.rank == 2:
            yield from rk.send(0, b"two", tag=9)
    Cluster(4).run(prog, ranks=[0, 1, 2])
    assert out["got"] == {b"one", b"two"}


def test_sendrecv_swaps():
    def prog(rk):
        other = 1 - rk.rank
        return (yield from rk.sendrecv(other, bytes([rk.rank]) * 40, other))
    assert Cluster(2).run(prog) == [b"\x01" * 40, b"\x00" * 40]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.08))
def test_lossy_fabric_delivers_once(seed, rate):
    rng = random.Random(seed)
    msgs = [rng.randbytes(rng.choice([8, 200, 20_000])) for _ in range(4)]
    c = Cluster(8, seed=seed, loss_rate=rate)
    assert exchange(c, msgs, 0, 7) == msgs
    assert c.errors == []


def test_zero_byte_pingpong_matches_measurement():
    c = Cluster(8, move_bytes=False)
    assert pingpong_latency_ps(c, 0, 4, 0) * 1e-6 == pytest.approx(1.293, rel=0.01)


def test_large_pingpong_matches_measurement():
    c = Cluster(8, move_bytes=False)
    half = pingpong_latency_ps(c, 0, 4, 4 << 20, iters=2, warmup=1) * 1e-6
    assert half == pytest.approx(2689.4, rel=0.01)


def test_bad_destination():
    def prog(rk):
        yield from rk.send(9, b"x")
    with pytest.raises(ValueError):
        Cluster(2).run(prog, ranks=[0])


@pytest.mark.parametrize("n,rpf,dims", [
    (1, 4, (1, 1, 1)), (16, 4, (1, 1, 1)), (17, 4, (2, 1, 1)), (64, 4, (4, 1, 1)),
    (65, 4, (4, 2, 1)), (256, 4, (4, 4, 1)), (512, 4, (4, 4, 2)), (128, 1, (4, 4, 2)),
])
def test_minimal_dims(n, rpf, dims):
    assert minimal_dims(n, rpf) == dims


def test_minimal_dims_rejects_oversubscription():
    with pytest.raises(ValueError):
        minimal_dims(513)
