"""Filesystem sources: the deterministic simulator and a POSIX directory walker."""

from metahood.simfs.backend import BackendNotFound, HsmBackend
from metahood.simfs.posix import PosixSource
from metahood.simfs.sim import (
    DEFAULT_MIX,
    ROOT_FID,
    InapplicableOp,
    SimCapacityError,
    SimConfig,
    SimError,
    SimFs,
    WorkloadOp,
    apply_op,
    create_namespace,
    hsm_backend_fetch,
    hsm_backend_store,
    random_workload,
)
from metahood.simfs.source import EntryVanished, FsSource, OstStat, SourceError

__all__ = [
    "BackendNotFound", "DEFAULT_MIX", "EntryVanished", "FsSource", "HsmBackend", "InapplicableOp",
    "OstStat", "PosixSource", "ROOT_FID", "SimCapacityError", "SimConfig", "SimError", "SimFs",
    "SourceError", "WorkloadOp", "apply_op", "create_namespace", "hsm_backend_fetch",
    "hsm_backend_store", "random_workload",
]
