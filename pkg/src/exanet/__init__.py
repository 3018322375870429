"""Discrete-event model of the ExaNet interconnect and its MPI-like runtime.

Layers, bottom up: ``gvas`` (80-bit global addresses), ``topology`` (QFDB mesh
plus 3D torus), ``fabric`` (cells, credits, virtual channels), ``endpoints``
(packetizer and mailboxes), ``rdma`` (block transfers, reads, page faults),
``runtime`` and ``collectives`` (eager/rendez-vous messaging), ``accel``
(allreduce accelerator), ``latmodel`` (analytic models) and ``harness``
(benchmarks and CLI).
"""
from .gvas import GlobalVirtualAddress, pack_address, unpack_address
from .latmodel import DEFAULT_PARAMS, CalibrationParams, bcast_expected, path_latency
from .runtime import Cluster, RuntimeCosts
from .topology import PathClass, Topology

__version__ = "0.1.0"

__all__ = ["CalibrationParams", "Cluster", "DEFAULT_PARAMS", "GlobalVirtualAddress", "PathClass",
           "RuntimeCosts", "Topology", "bcast_expected", "pack_address", "path_latency",
           "unpack_address"]
