"""Random fixed-size 3D patch extraction for training."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimMismatch, SizeExceedsVolume
from .volio import Volume


class SampleMode(Enum):
    UNIFORM = "uniform"
    CLASS_BALANCED = "class_balanced"


@dataclass(frozen=True)
class PatchSpec:
    size: tuple[int, int, int]
    count: int
    mode: SampleMode = SampleMode.UNIFORM
    seed: int = 0


@dataclass(frozen=True)
class Patch:
    intensities: np.ndarray
    labels: np.ndarray
    origin: tuple[int, int, int]
    source_id: str


def _extract(v, labels, origin, size, source_id):
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return Patch(v.data[sl].copy(), labels.data[sl].copy(), tuple(origin), source_id)


def sample_patches(
    v: Volume, labels: Volume, spec: PatchSpec, source_id: str = ""
) -> list[Patch]:
    """Draw ``spec.count`` patches; pure sub-block gather, no resampling.

    Uniform mode draws the corner uniformly over all valid corners.
    Class-balanced mode cycles a target class and draws uniformly among
    corners whose patch contains at least one voxel of it, falling back
    to uniform when the class is absent from the volume.
    """
    if v.dims != labels.dims:
        raise DimMismatch(f"intensity dims {v.dims} != label dims {labels.dims}")
    size = tuple(int(s) for s in spec.size)
    if any(s < 1 for s in size) or any(s > d for s, d in zip(size, v.dims)):
        raise SizeExceedsVolume(f"patch size {size} does not fit in volume {v.dims}")
    if spec.count < 1:
        raise DimMismatch("count must be >= 1")

    rng = np.random.default_rng(spec.seed)
    max_corner = tuple(d - s for d, s in zip(v.dims, size))

    if spec.mode is SampleMode.UNIFORM:
        return [
            _extract(v, labels, tuple(rng.integers(0, m + 1) for m in max_corner), size, source_id)
            for _ in range(spec.count)
        ]

    lab = labels.data.astype(np.int64)
    present = np.unique(lab)
    n_classes = int(present.max()) + 1 if present.size else 1
    patches = []
    for i in range(spec.count):
        target = i % n_classes
        if target not in present:
            origin = tuple(rng.integers(0, m + 1) for m in max_corner)
        else:
            origin = _corner_containing(rng, lab, target, size, max_corner)
        patches.append(_extract(v, labels, origin, size, source_id))
    return patches


def _corner_containing(rng, lab, target, size, max_corner):
    """Uniform draw over corners whose patch contains the target class,
    via an integral image of the class indicator."""
    ind = (lab == target).astype(np.int64)
    p = np.zeros(tuple(d + 1 for d in ind.shape), dtype=np.int64)
    p[1:, 1:, 1:] = ind.cumsum(0).cumsum(1).cumsum(2)
    n0, n1, n2 = (m + 1 for m in max_corner)
    s0, s1, s2 = size

    def block(a, b, c):
        return p[a:a + n0, b:b + n1, c:c + n2]

    counts = (
        block(s0, s1, s2) - block(0, s1, s2) - block(s0, 0, s2) - block(s0, s1, 0)
        + block(0, 0, s2) + block(0, s1, 0) + block(s0, 0, 0) - block(0, 0, 0)
    )
    valid = np.flatnonzero(counts > 0)
    flat = valid[rng.integers(0, valid.size)]
    return tuple(int(i) for i in np.unravel_index(flat, counts.shape))


def patch_stream(volumes, spec: PatchSpec):
    """Endless seeded generator cycling over (id, intensity, labels) triples,
    yielding (intensity patch, label patch) pairs for the training loop."""
    rng = np.random.default_rng(spec.seed)
    items = list(volumes)
    while True:
        vid, v, labels = items[rng.integers(0, len(items))]
        sub = PatchSpec(spec.size, 1, spec.mode, int(rng.integers(0, 2**31)))
        patch = sample_patches(v, labels, sub, vid)[0]
        yield patch.intensities, patch.labels
