"""Migration agent: simulated processes, process images, checkpoint and restore."""

from .image import ProcessImage
from .migrate import RestorerPlan, checkpoint, restore, self_migrate
from .process import ENCLAVE, EXPORT_BUFFER, ORDINARY, HostThread, Region, SimProcess

__all__ = [
    "ProcessImage",
    "RestorerPlan",
    "checkpoint",
    "restore",
    "self_migrate",
    "ENCLAVE",
    "EXPORT_BUFFER",
    "ORDINARY",
    "HostThread",
    "Region",
    "SimProcess",
]
