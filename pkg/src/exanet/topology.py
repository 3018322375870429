"""Prototype topology: 4-FPGA QFDBs (full mesh) joined by a 3D torus of Network FPGAs."""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

FPGAS_PER_QFDB = 4
NETWORK_FPGA = 0
CORES_PER_FPGA = 4
PROTOTYPE_DIMS = (4, 4, 2)


class InvalidDims(ValueError):
    pass


class SameNode(ValueError):
    pass


class LinkClass(Enum):
    INTRA_QFDB = "intra_qfdb"
    INTRA_MEZZ = "intra_mezz"
    INTER_MEZZ = "inter_mezz"

    @property
    def rate(self) -> float:
        return 16e9 if self is LinkClass.INTRA_QFDB else 10e9

    @property
    def external(self) -> bool:
        return self is not LinkClass.INTRA_QFDB


# X stays inside a mezzanine (blade); Y and Z leave it.
AXIS_CLASS = (LinkClass.INTRA_MEZZ, LinkClass.INTER_MEZZ, LinkClass.INTER_MEZZ)


@dataclass(frozen=True, order=True)
class NodeId:
    qfdb_coord: tuple[int, int, int]
    fpga_index: int

    @property
    def is_network_fpga(self) -> bool:
        return self.fpga_index == NETWORK_FPGA

    def __str__(self):
        x, y, z = self.qfdb_coord
        return f"Q({x},{y},{z})F{self.fpga_index + 1}"


@dataclass(frozen=True)
class Hop:
    src: int
    dst: int
    link_class: LinkClass
    dim: int = -1  # -1 for intra-QFDB hops
    wrap: bool = False  # crosses the ring's wraparound link

    @property
    def port(self) -> tuple[int, int]:
        return (self.src, self.dst)


@dataclass(frozen=True)
class PathClass:
    n_intra_qfdb: int = 0
    n_intra_mezz: int = 0
    n_inter_mezz: int = 0

    def __post_init__(self):
        if min(self.n_intra_qfdb, self.n_intra_mezz, self.n_inter_mezz) < 0:
            raise ValueError("hop counts must be non-negative")

    @property
    def hops(self) -> int:
        return self.n_intra_qfdb + self.n_intra_mezz + self.n_inter_mezz

    @property
    def external_hops(self) -> int:
        return self.n_intra_mezz + self.n_inter_mezz

    @property
    def switches(self) -> int:
        """Network routers traversed: N external hops pass N+1 routers."""
        return self.external_hops + 1 if self.external_hops else 0

    @property
    def label(self) -> str:
        ext, q = self.external_hops, self.n_intra_qfdb
        if self.hops == 0:
            return "Intra-FPGA"
        if ext == 0:
            return "Intra-QFDB-sh"
        if self.n_inter_mezz == 0 and self.n_intra_mezz == 1:
            return "Intra-mezz-sh" if q == 0 else f"Intra-mezz-mh({self.hops})"
        if self.n_inter_mezz == 0:
            return f"Intra-mezz({self.n_intra_mezz},{q})"
        return f"Inter-mezz({self.n_inter_mezz},{self.n_intra_mezz},{q})"


class Topology:
    def __init__(self, dims=PROTOTYPE_DIMS):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise InvalidDims(f"torus dims must be three integers >= 1, got {dims}")
        self.dims = dims
        self.n_qfdbs = dims[0] * dims[1] * dims[2]
        self.n_nodes = self.n_qfdbs * FPGAS_PER_QFDB
        self._route_cache: dict[tuple[int, int], tuple[Hop, ...]] = {}

    def __repr__(self):
        return f"Topology(dims={self.dims})"

    # --- indexing -------------------------------------------------------
    def qfdb_index(self, coord) -> int:
        x, y, z = coord
        nx, ny, _ = self.dims
        return x + nx * (y + ny * z)

    def qfdb_coord(self, q: int) -> tuple[int, int, int]:
        nx, ny, _ = self.dims
        return (q % nx, (q // nx) % ny, q // (nx * ny))

    def index(self, node: NodeId) -> int:
        for c, d in zip(node.qfdb_coord, self.dims):
            if not 0 <= c < d:
                raise ValueError(f"{node} outside torus {self.dims}")
        if not 0 <= node.fpga_index < FPGAS_PER_QFDB:
            raise ValueError(f"bad fpga index in {node}")
        return self.qfdb_index(node.qfdb_coord) * FPGAS_PER_QFDB + node.fpga_index

    def node(self, idx: int) -> NodeId:
        if not 0 <= idx < self.n_nodes:
            raise ValueError(f"node index {idx} out of range")
        q, f = divmod(idx, FPGAS_PER_QFDB)
        return NodeId(self.qfdb_coord(q), f)

    def network_fpga(self, idx: int) -> int:
        return idx - idx % FPGAS_PER_QFDB

    def _idx(self, n) -> int:
        return n if isinstance(n, int) else self.index(n)

    # --- links ----------------------------------------------------------
    @cached_property
    def links(self) -> list[tuple[int, int, LinkClass]]:
        """Undirected links (u < v); every link is bidirectional."""
        out = []
        for q in range(self.n_qfdbs):
            base = q * FPGAS_PER_QFDB
            for a in range(FPGAS_PER_QFDB):
                for b in range(a + 1, FPGAS_PER_QFDB):
                    out.append((base + a, base + b, LinkClass.INTRA_QFDB))
        seen = set()
        for q in range(self.n_qfdbs):
            coord = self.qfdb_coord(q)
            for dim, size in enumerate(self.dims):
                if size < 2:
                    continue
                nxt = list(coord)
                nxt[dim] = (coord[dim] + 1) % size
                u = q * FPGAS_PER_QFDB
                v = self.qfdb_index(nxt) * FPGAS_PER_QFDB
                key = (min(u, v), max(u, v), dim)
                if key in seen:
                    continue  # ring of two: a single link
                seen.add(key)
                out.append((key[0], key[1], AXIS_CLASS[dim]))
        return out

    @cached_property
    def ports(self) -> dict[tuple[int, int], LinkClass]:
        """Directed channels (u, v) -> class."""
        ports = {}
        for u, v, cls in self.links:
            ports[(u, v)] = cls
            ports[(v, u)] = cls
        return ports

    # --- routing --------------------------------------------------------
    def route(self, src, dst) -> tuple[Hop, ...]:
        s, d = self._idx(src), self._idx(dst)
        if s == d:
            raise SameNode(f"source and destination are both node {s}")
        key = (s, d)
        hops = self._route_cache.get(key)
        if hops is None:
            hops = self._route_cache[key] = tuple(self._dor(s, d))
        return hops

    def _dor(self, s: int, d: int):
        sq, dq = s // FPGAS_PER_QFDB, d // FPGAS_PER_QFDB
        if sq == dq:
            yield Hop(s, d, LinkClass.INTRA_QFDB)
            return
        cur = self.network_fpga(s)
        if cur != s:
            yield Hop(s, cur, LinkClass.INTRA_QFDB)
        coord = list(self.qfdb_coord(sq))
        target = self.qfdb_coord(dq)
        for dim, size in enumerate(self.dims):
            step, count = ring_direction(coord[dim], target[dim], size)
            for _ in range(count):
                old = coord[dim]
                coord[dim] = (old + step) % size
                wrap = (step > 0 and old == size - 1) or (step < 0 and old == 0)
                nxt = self.qfdb_index(coord) * FPGAS_PER_QFDB
                yield Hop(cur, nxt, AXIS_CLASS[dim], dim, wrap)
                cur = nxt
        if cur != d:
            yield Hop(cur, d, LinkClass.INTRA_QFDB)

    def classify_path(self, src, dst) -> PathClass:
        counts = {c: 0 for c in LinkClass}
        for hop in self.route(src, dst):
            counts[hop.link_class] += 1
        return PathClass(counts[LinkClass.INTRA_QFDB], counts[LinkClass.INTRA_MEZZ],
                         counts[LinkClass.INTER_MEZZ])

    def path_class(self, src, dst) -> PathClass:
        """classify_path that also accepts src == dst (intra-FPGA, zero hops)."""
        if self._idx(src) == self._idx(dst):
            return PathClass()
        return self.classify_path(src, dst)

    # --- naming -----------------------------------------------------------
    def parse_mpsoc(self, name: str) -> NodeId:
        """Map an 'M<m>Q<letter>F<k>' name to a node.

        Mezzanines (blades) are numbered from 1 over (y, z); the QFDB letter is
        the position on the X ring and F1 is the Network FPGA.
        """
        m = re.fullmatch(r"M(\d+)Q([A-Z])F(\d)", name)
        if not m:
            raise ValueError(f"bad MPSoC name {name!r}")
        mezz = int(m.group(1)) - 1
        x = ord(m.group(2)) - ord("A")
        f = int(m.group(3)) - 1
        nx, ny, nz = self.dims
        y, z = mezz % ny, mezz // ny
        node = NodeId((x, y, z), f)
        self.index(node)
        return node

    def mpsoc_name(self, node) -> str:
        node = self.node(node) if isinstance(node, int) else node
        x, y, z = node.qfdb_coord
        return f"M{1 + y + self.dims[1] * z}Q{chr(ord('A') + x)}F{node.fpga_index + 1}"

    # --- structured text ------------------------------------------------
    def to_text(self) -> str:
        return "[topology]\ndims = {} {} {}\n".format(*self.dims)

    @classmethod
    def from_text(cls, text: str) -> "Topology":
        import configparser
        cp = configparser.ConfigParser()
        cp.read_string(text)
        return cls(tuple(int(v) for v in cp["topology"]["dims"].replace(",", " ").split()))


def ring_direction(a: int, b: int, size: int) -> tuple[int, int]:
    """(step, hops) for minimal travel a -> b on a ring; ties go positive."""
    fwd = (b - a) % size
    back = (a - b) % size
    if fwd == 0:
        return 1, 0
    if fwd <= back:
        return 1, fwd
    return -1, back
