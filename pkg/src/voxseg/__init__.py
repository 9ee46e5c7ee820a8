"""voxseg: volumetric brain-MRI preprocessing, rigid registration, and
3D tissue segmentation with hand-written network forward/backward passes."""

from .kernels import BACKEND
from .volio import Volume, VolumeKind, read_volume, write_volume

__version__ = "0.1.0"

__all__ = ["Volume", "VolumeKind", "read_volume", "write_volume", "BACKEND"]
