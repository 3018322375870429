"""Collectives built from point-to-point calls: binomial bcast, recursive-doubling allreduce, barrier.

Each function is a rank-side generator used as ``yield from bcast(rank, ...)``.
"""
from __future__ import annotations

import numpy as np

from .runtime import BARRIER_CTX, COLL_CTX, Rank
from .schedules import bcast_children, dissemination_rounds, largest_pow2
from .sim import ns

OPS = {"sum": np.add, "min": np.minimum, "max": np.maximum}
DTYPES = ("int32", "float32", "float64")


class UnsupportedOp(ValueError):
    pass


def get_op(op: str):
    try:
        return OPS[op]
    except KeyError:
        raise UnsupportedOp(f"unsupported reduction {op!r}; expected one of {sorted(OPS)}") from None


def _tag(rank: Rank) -> int:
    rank.coll_seq += 1
    return rank.coll_seq & 0xFFFF


def barrier(rank: Rank):
    """Dissemination barrier: round k talks to rank +/- 2^k."""
    n = rank.size
    base = _tag(rank)
    for i, d in enumerate(dissemination_rounds(n)):
        tag = (base * 16 + i) & 0xFFFF
        yield from rank.sendrecv((rank.rank + d) % n, 0, (rank.rank - d) % n, tag, BARRIER_CTX)


def bcast(rank: Rank, root: int, data):
    """Binomial broadcast; children are served farthest first with blocking sends.

    ``data`` is bytes (or an int size) at the root and ignored elsewhere.
    Returns the received payload.
    """
    n = rank.size
    tag = _tag(rank)
    rel = (rank.rank - root) % n
    parent, children = bcast_children(rel, n)
    if parent >= 0:
        data = yield from rank.recv((parent + root) % n, tag, COLL_CTX)
    for child in children:
        yield from rank.send((child + root) % n, data, tag, COLL_CTX)
    return data


def _combine(op, mine: np.ndarray, theirs: np.ndarray, mine_first: bool) -> np.ndarray:
    # lower rank's operand always goes first, so both partners compute identical bits
    return op(mine, theirs) if mine_first else op(theirs, mine)


def allreduce(rank: Rank, vector: np.ndarray, op: str = "sum"):
    """Recursive doubling; non-powers of two fold the extra ranks in first."""
    fn = get_op(op)
    params = rank.cluster.params
    vec = np.ascontiguousarray(vector)
    nbytes = vec.nbytes
    n = rank.size
    base = _tag(rank) * 4
    tag, fold_tag, unfold_tag = base & 0xFFFF, (base + 1) & 0xFFFF, (base + 2) & 0xFFFF
    copy_ps = ns(params.copy_ns + params.memcpy_ns_per_byte * nbytes)
    reduce_ps = ns(params.reduce_ns_per_byte * nbytes)
    yield from rank.cpu(ns(rank.cluster.costs.allreduce_setup_ns))
    yield from rank.cpu(copy_ps)  # stage the user buffer

    def unpack(raw):
        return np.frombuffer(raw, dtype=vec.dtype).reshape(vec.shape)

    p = largest_pow2(n)
    extra = n - p
    me = rank.rank
    acc = vec.copy()
    if me >= p:
        yield from rank.send(me - p, acc.tobytes(), fold_tag, COLL_CTX)
        acc = unpack((yield from rank.recv(me - p, unfold_tag, COLL_CTX)))
    else:
        if me < extra:
            other = unpack((yield from rank.recv(me + p, fold_tag, COLL_CTX)))
            yield from rank.cpu(reduce_ps)
            acc = _combine(fn, acc, other, True)
        d = 1
        while d < p:
            partner = me ^ d
            raw = yield from rank.sendrecv(partner, acc.tobytes(), partner, tag, COLL_CTX)
            yield from rank.cpu(reduce_ps)
            acc = _combine(fn, acc, unpack(raw), me < partner)
            d <<= 1
        if me < extra:
            yield from rank.send(me + p, acc.tobytes(), unfold_tag, COLL_CTX)
    yield from rank.cpu(copy_ps)  # copy the result out
    return acc


def tree_fold(vectors, op: str = "sum") -> np.ndarray:
    """Reference reduction with the same pairwise combining tree, written recursively."""
    fn = get_op(op)
    vs = [np.asarray(v) for v in vectors]
    p = largest_pow2(len(vs))
    leaves = [fn(vs[i], vs[p + i]) if p + i < len(vs) else vs[i] for i in range(p)]

    def tree(lo, hi):
        if hi - lo == 1:
            return leaves[lo]
        mid = (lo + hi) // 2
        return fn(tree(lo, mid), tree(mid, hi))
    return tree(0, p)
