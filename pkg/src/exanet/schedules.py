"""Rank placement and collective communication schedules."""
from __future__ import annotations

from dataclasses import dataclass, field

from .topology import CORES_PER_FPGA, FPGAS_PER_QFDB, PathClass, Topology

CLASS_ORDER = ("mpsoc", "qfdb", "mezzanine")


@dataclass(frozen=True)
class RankMap:
    """rank -> (node index, core). Block placement fills an FPGA before moving on."""
    topology: Topology
    n_ranks: int
    ranks_per_fpga: int = CORES_PER_FPGA

    def __post_init__(self):
        if not 1 <= self.ranks_per_fpga <= CORES_PER_FPGA:
            raise ValueError("ranks_per_fpga must be in 1..4")
        if self.n_ranks < 1:
            raise ValueError("need at least one rank")
        if self.n_ranks > self.topology.n_nodes * self.ranks_per_fpga:
            raise ValueError(f"{self.n_ranks} ranks do not fit on {self.topology}")

    def node_of(self, rank: int) -> int:
        if not 0 <= rank < self.n_ranks:
            raise ValueError(f"rank {rank} out of range")
        return rank // self.ranks_per_fpga

    def core_of(self, rank: int) -> int:
        return rank % self.ranks_per_fpga

    def qfdb_of(self, rank: int) -> int:
        return self.node_of(rank) // FPGAS_PER_QFDB

    def path_class(self, a: int, b: int) -> PathClass:
        return self.topology.path_class(self.node_of(a), self.node_of(b))

    def pair_class(self, a: int, b: int) -> str:
        if self.node_of(a) == self.node_of(b):
            return "mpsoc"
        if self.qfdb_of(a) == self.qfdb_of(b):
            return "qfdb"
        return "mezzanine"


@dataclass
class CollectiveSchedule:
    kind: str
    n_ranks: int
    steps: list[list[tuple[int, int]]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def annotate(self, placement: RankMap) -> list[list[tuple[int, int, PathClass]]]:
        return [[(s, r, placement.path_class(s, r)) for s, r in step] for step in self.steps]


def binomial_bcast_schedule(n_ranks: int, root: int = 0) -> CollectiveSchedule:
    """Binomial tree; each holder sends to the farthest child first."""
    sched = CollectiveSchedule("bcast", n_ranks)
    mask = 1
    while mask < n_ranks:
        mask <<= 1
    mask >>= 1
    while mask >= 1:
        step = []
        for rel in range(0, n_ranks, 2 * mask):
            if rel + mask < n_ranks:
                step.append(((rel + root) % n_ranks, (rel + mask + root) % n_ranks))
        sched.steps.append(step)
        mask >>= 1
    return sched


def bcast_children(rel: int, n_ranks: int) -> tuple[int, list[int]]:
    """(parent, children) in relative rank space, children in send order."""
    mask = 1
    parent = -1
    while mask < n_ranks:
        if rel & mask:
            parent = rel - mask
            break
        mask <<= 1
    mask >>= 1
    children = []
    while mask > 0:
        if rel + mask < n_ranks:
            children.append(rel + mask)
        mask >>= 1
    return parent, children


def largest_pow2(n: int) -> int:
    p = 1
    while p * 2 <= n:
        p *= 2
    return p


def recursive_doubling_schedule(n_ranks: int) -> CollectiveSchedule:
    """Pairwise exchanges at distance 1, 2, 4, ...

    Non-powers of two fold ranks >= P into rank - P first and unfold at the end.
    """
    sched = CollectiveSchedule("allreduce", n_ranks)
    p = largest_pow2(n_ranks)
    extra = n_ranks - p
    if extra:
        sched.steps.append([(p + i, i) for i in range(extra)])
    d = 1
    while d < p:
        sched.steps.append([(r, r ^ d) for r in range(p)])
        d <<= 1
    if extra:
        sched.steps.append([(i, p + i) for i in range(extra)])
    return sched


def step_classes(sched: CollectiveSchedule, placement: RankMap) -> list[str]:
    out = []
    for step in sched.steps:
        worst = 0
        for s, r in step:
            worst = max(worst, CLASS_ORDER.index(placement.pair_class(s, r)))
        out.append(CLASS_ORDER[worst])
    return out


def dissemination_rounds(n_ranks: int) -> list[int]:
    d, out = 1, []
    while d < n_ranks:
        out.append(d)
        d <<= 1
    return out
