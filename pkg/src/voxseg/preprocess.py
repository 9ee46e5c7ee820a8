"""Intensity preprocessing: standardization, min-max rescaling, 3D CLAHE,
landmark-based histogram matching, and per-tissue statistics.

All statistics accumulate in float64 regardless of the storage dtype.
"Foreground" throughout means voxels with intensity > 0 (inputs are
skull-stripped, so background is exactly zero).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateHistogram, DimMismatch, SigmaZero, ZeroRange
from .volio import Volume, VolumeKind

EPS = 1e-12

# 64 landmarks uniformly spaced in [1, 99] plus the 0/100 endpoints
DEFAULT_PERCENTILES = np.concatenate(([0.0], np.linspace(1.0, 99.0, 64), [100.0]))


def standardize(v: Volume) -> Volume:
    """Shift/scale to zero mean, unit (population) std over all voxels."""
    if v.kind is not VolumeKind.INTENSITY:
        raise DimMismatch("standardize expects an intensity volume")
    data = v.data.astype(np.float64)
    mu = data.mean()
    sigma = data.std()
    if sigma <= EPS:
        raise SigmaZero(f"volume std {sigma} below {EPS}")
    return v.with_data(((data - mu) / sigma).astype(v.data.dtype))


def rescale_minmax(v: Volume) -> Volume:
    """Affinely rescale intensities to [0, 1]."""
    if v.kind is not VolumeKind.INTENSITY:
        raise DimMismatch("rescale_minmax expects an intensity volume")
    data = v.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi - lo <= EPS:
        raise ZeroRange(f"intensity range [{lo}, {hi}] is degenerate")
    return v.with_data(((data - lo) / (hi - lo)).astype(v.data.dtype))


def _clipped_cdf(values: np.ndarray, bins: int, clip_limit: float) -> np.ndarray | None:
    """Clipped-histogram CDF lookup table over [0, 1]; None when empty."""
    n = values.size
    if n == 0:
        return None
    hist = np.bincount(
        np.minimum((values * bins).astype(np.int64), bins - 1), minlength=bins
    ).astype(np.float64)
    limit = clip_limit * n
    excess = np.maximum(hist - limit, 0.0).sum()
    if excess > 0:
        hist = np.minimum(hist, limit) + excess / bins
    return np.cumsum(hist) / hist.sum()


def adaptive_hist_eq(
    v: Volume,
    grid: tuple[int, int, int] = (8, 8, 8),
    clip_limit: float = 0.01,
    bins: int = 256,
    foreground_only: bool = True,
) -> Volume:
    """3D CLAHE on a volume whose values already lie in [0, 1].

    The volume is split into ``grid`` blocks; each block gets a clipped
    histogram CDF, and every voxel interpolates trilinearly between the
    CDF mappings of the 8 surrounding block centres. Blocks with no
    foreground fall back to the global mapping.
    """
    if v.kind is not VolumeKind.INTENSITY:
        raise DimMismatch("adaptive_hist_eq expects an intensity volume")
    data = v.data.astype(np.float64)
    if data.min() < -EPS or data.max() > 1.0 + EPS:
        raise ZeroRange("adaptive_hist_eq expects values in [0, 1]; run rescale_minmax first")
    data = np.clip(data, 0.0, 1.0)
    grid = tuple(int(g) for g in grid)
    if any(g < 1 for g in grid) or bins < 2 or not (0.0 < clip_limit <= 1.0):
        raise DimMismatch(f"bad CLAHE parameters grid={grid} clip={clip_limit} bins={bins}")

    fg = data > 0 if foreground_only else np.ones(data.shape, dtype=bool)
    global_cdf = _clipped_cdf(data[fg], bins, clip_limit)
    if global_cdf is None:
        raise DegenerateHistogram("no foreground voxels")

    edges = [np.linspace(0, d, g + 1).astype(np.int64) for d, g in zip(v.dims, grid)]
    luts = np.empty((*grid, bins), dtype=np.float64)
    for i in range(grid[0]):
        for j in range(grid[1]):
            for k in range(grid[2]):
                block = data[edges[0][i]:edges[0][i + 1],
                             edges[1][j]:edges[1][j + 1],
                             edges[2][k]:edges[2][k + 1]]
                bfg = fg[edges[0][i]:edges[0][i + 1],
                         edges[1][j]:edges[1][j + 1],
                         edges[2][k]:edges[2][k + 1]]
                cdf = _clipped_cdf(block[bfg], bins, clip_limit)
                luts[i, j, k] = global_cdf if cdf is None else cdf

    bin_idx = np.minimum((data * bins).astype(np.int64), bins - 1)

    # fractional position of every voxel among block centres, per axis
    pos, lo_idx, frac = [], [], []
    for axis, g in enumerate(grid):
        centers = (edges[axis][:-1] + edges[axis][1:]) / 2.0
        coord = np.arange(v.dims[axis], dtype=np.float64)
        p = np.interp(coord, centers, np.arange(g, dtype=np.float64))
        i0 = np.clip(np.floor(p).astype(np.int64), 0, g - 1)
        i1 = np.minimum(i0 + 1, g - 1)
        f = np.clip(p - i0, 0.0, 1.0)
        pos.append((i0, i1))
        frac.append(f)

    out = np.zeros_like(data)
    f0 = frac[0][:, None, None]
    f1 = frac[1][None, :, None]
    f2 = frac[2][None, None, :]
    for a, wa in ((0, 1.0 - f0), (1, f0)):
        ia = pos[0][a][:, None, None]
        for b, wb in ((0, 1.0 - f1), (1, f1)):
            ib = pos[1][b][None, :, None]
            for c, wc in ((0, 1.0 - f2), (1, f2)):
                ic = pos[2][c][None, None, :]
                mapped = luts[
                    np.broadcast_to(ia, v.dims),
                    np.broadcast_to(ib, v.dims),
                    np.broadcast_to(ic, v.dims),
                    bin_idx,
                ]
                out += wa * wb * wc * mapped
    np.clip(out, 0.0, 1.0, out=out)
    if foreground_only:
        out[~fg] = 0.0
    return v.with_data(out.astype(v.data.dtype))


def compute_landmarks(
    v: Volume,
    percentiles: np.ndarray = DEFAULT_PERCENTILES,
    foreground_only: bool = True,
) -> np.ndarray:
    """Empirical intensity quantiles at the given percentiles."""
    if v.kind is not VolumeKind.INTENSITY:
        raise DimMismatch("compute_landmarks expects an intensity volume")
    percentiles = np.asarray(percentiles, dtype=np.float64)
    if percentiles.ndim != 1 or np.any(np.diff(percentiles) < 0) or \
            percentiles.min() < 0 or percentiles.max() > 100:
        raise DimMismatch("percentiles must be ascending within [0, 100]")
    values = v.data[v.data > 0] if foreground_only else v.data.ravel()
    values = values.astype(np.float64)
    if values.size == 0 or values.min() == values.max():
        raise DegenerateHistogram("all foreground voxels are equal")
    return np.percentile(values, percentiles)


@dataclass(frozen=True)
class LandmarkMap:
    """Monotone piecewise-linear intensity mapping between landmark vectors."""

    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.source, dtype=np.float64)
        tgt = np.asarray(self.target, dtype=np.float64)
        if src.shape != tgt.shape or src.ndim != 1 or src.size < 2:
            raise DimMismatch("landmark vectors must be equal-length 1D, length >= 2")
        # collapse duplicate source landmarks (degenerate quantiles)
        src, idx = np.unique(src, return_index=True)
        tgt = np.maximum.accumulate(tgt[idx])
        if src.size < 2:
            raise DegenerateHistogram("fewer than 2 distinct source landmarks")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)

    def apply(self, values: np.ndarray) -> np.ndarray:
        src, tgt = self.source, self.target
        out = np.interp(values, src, tgt)
        slope_lo = (tgt[1] - tgt[0]) / (src[1] - src[0])
        slope_hi = (tgt[-1] - tgt[-2]) / (src[-1] - src[-2])
        below = values < src[0]
        above = values > src[-1]
        out = np.where(below, tgt[0] + (values - src[0]) * slope_lo, out)
        out = np.where(above, tgt[-1] + (values - src[-1]) * slope_hi, out)
        return out


def match_histogram(moving: Volume, lmap: LandmarkMap) -> Volume:
    """Remap intensities through the landmark map (linear tail extrapolation)."""
    if moving.kind is not VolumeKind.INTENSITY:
        raise DimMismatch("match_histogram expects an intensity volume")
    out = lmap.apply(moving.data.astype(np.float64))
    return moving.with_data(out.astype(moving.data.dtype))


@dataclass(frozen=True)
class ClassStats:
    class_id: int
    count: int
    fraction: float
    min: float
    max: float
    mean: float
    std: float
    histogram: np.ndarray  # 256 bins over the volume's rescaled [0,1] range


@dataclass(frozen=True)
class TissueStats:
    classes: tuple[ClassStats, ...]
    total_voxels: int

    def to_json(self) -> str:
        doc = [
            {
                "class": c.class_id,
                "count": c.count,
                "fraction": c.fraction,
                "min": c.min,
                "max": c.max,
                "mean": c.mean,
                "std": c.std,
                "histogram": c.histogram.tolist(),
            }
            for c in self.classes
        ]
        return json.dumps(doc, indent=2)

    def to_text(self) -> str:
        lines = [f"{'class':>6} {'count':>10} {'fraction':>9} {'min':>10} {'max':>10} {'mean':>10} {'std':>10}"]
        for c in self.classes:
            lines.append(
                f"{c.class_id:>6d} {c.count:>10d} {c.fraction:>9.5f} "
                f"{c.min:>10.5f} {c.max:>10.5f} {c.mean:>10.5f} {c.std:>10.5f}"
            )
        return "\n".join(lines)


def tissue_stats(v: Volume, labels: Volume, bins: int = 256) -> TissueStats:
    """Per-class intensity statistics for reference selection."""
    if v.dims != labels.dims:
        raise DimMismatch(f"volume dims {v.dims} != label dims {labels.dims}")
    if labels.kind is not VolumeKind.LABEL:
        raise DimMismatch("labels must be a Label volume")
    data = v.data.astype(np.float64).ravel()
    lab = labels.data.astype(np.int64).ravel()
    lo, hi = data.min(), data.max()
    scaled = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    total = data.size
    classes = []
    for cid in np.unique(lab):
        sel = lab == cid
        vals = data[sel]
        hist = np.bincount(
            np.minimum((scaled[sel] * bins).astype(np.int64), bins - 1), minlength=bins
        )
        classes.append(
            ClassStats(
                class_id=int(cid),
                count=int(sel.sum()),
                fraction=float(sel.sum() / total),
                min=float(vals.min()),
                max=float(vals.max()),
                mean=float(vals.mean()),
                std=float(vals.std()),
                histogram=hist,
            )
        )
    return TissueStats(tuple(classes), total)
