"""Rigid 6-DOF registration onto a fixed grid.

Transforms rotate about a fixed world-space centre with intrinsic Z-Y-X
Euler angles, then translate: ``x' = R (x - c) + c + t``. A transform maps
fixed-grid world coordinates into moving-volume world coordinates, so it
can be handed straight to :func:`resample`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateInput, NoOverlap, ParseError, SingularAffine
from .kernels import resample_trilinear
from .volio import Volume, VolumeKind


def euler_zyx_matrix(angles) -> np.ndarray:
    """Rotation matrix for intrinsic Z-Y-X Euler angles (radians)."""
    az, ay, ax = angles
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz @ ry @ rx


def matrix_to_euler_zyx(rot: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`euler_zyx_matrix` (gimbal-safe for |ay| < pi/2)."""
    ay = np.arcsin(np.clip(-rot[2, 0], -1.0, 1.0))
    if abs(rot[2, 0]) < 1.0 - 1e-12:
        az = np.arctan2(rot[1, 0], rot[0, 0])
        ax = np.arctan2(rot[2, 1], rot[2, 2])
    else:
        az = np.arctan2(-rot[0, 1], rot[1, 1])
        ax = 0.0
    return float(az), float(ay), float(ax)


@dataclass(frozen=True)
class RigidTransform:
    rotation: tuple[float, float, float]  # intrinsic Z-Y-X Euler, radians
    translation: tuple[float, float, float]  # mm
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)  # mm

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), tuple(center))

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 world-to-world matrix."""
        rot = euler_zyx_matrix(self.rotation)
        c = np.asarray(self.center)
        m = np.eye(4)
        m[:3, :3] = rot
        m[:3, 3] = c - rot @ c + np.asarray(self.translation)
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 3) world points."""
        rot = euler_zyx_matrix(self.rotation)
        c = np.asarray(self.center)
        t = np.asarray(self.translation)
        return (points - c) @ rot.T + c + t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``other`` first, then ``self``."""
        m = self.matrix() @ other.matrix()
        rot = m[:3, :3]
        angles = matrix_to_euler_zyx(rot)
        c = np.asarray(self.center)
        t = m[:3, 3] - c + rot @ c
        return RigidTransform(angles, tuple(t), tuple(c))


def invert(t: RigidTransform) -> RigidTransform:
    """Exact inverse about the same centre."""
    rot = euler_zyx_matrix(t.rotation)
    inv_t = -rot.T @ np.asarray(t.translation)
    return RigidTransform(
        matrix_to_euler_zyx(rot.T), tuple(inv_t), t.center
    )


def save_transform(t: RigidTransform, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rigid-v1\n")
        fh.write("euler_zyx_rad: " + " ".join(f"{a:.17g}" for a in t.rotation) + "\n")
        fh.write("translation_mm: " + " ".join(f"{a:.17g}" for a in t.translation) + "\n")
        fh.write("center_mm: " + " ".join(f"{a:.17g}" for a in t.center) + "\n")


def load_transform(path) -> RigidTransform:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read transform file: {exc}") from exc
    lines = [ln.strip() for ln in lines if ln.strip()]
    if not lines or lines[0] != "rigid-v1":
        raise ParseError("missing rigid-v1 version line")
    fields = {}
    for ln in lines[1:]:
        if ":" not in ln:
            raise ParseError(f"bad transform line: {ln!r}")
        key, _, rest = ln.partition(":")
        try:
            fields[key.strip()] = tuple(float(x) for x in rest.split())
        except ValueError as exc:
            raise ParseError(f"bad number in line {ln!r}") from exc
    for key in ("euler_zyx_rad", "translation_mm", "center_mm"):
        if key not in fields or len(fields[key]) != 3:
            raise ParseError(f"transform file needs 3 values for {key}")
    return RigidTransform(fields["euler_zyx_rad"], fields["translation_mm"], fields["center_mm"])


class Interp(Enum):
    TRILINEAR = "trilinear"
    NEAREST = "nearest"


@dataclass(frozen=True)
class GridSpec:
    """The geometry of a sampling grid (a volume minus its data)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray

    @classmethod
    def of(cls, v: Volume) -> "GridSpec":
        return cls(v.dims, v.spacing, v.affine)


def _world_coords(grid: GridSpec) -> np.ndarray:
    idx = np.indices(grid.dims, dtype=np.float64).reshape(3, -1).T
    return idx @ grid.affine[:3, :3].T + grid.affine[:3, 3]


def resample(
    v: Volume,
    t: RigidTransform,
    fixed_grid: GridSpec,
    mode: Interp = Interp.TRILINEAR,
    default_value: float = 0.0,
) -> Volume:
    """Pull ``v`` onto ``fixed_grid``: each fixed voxel's world position is
    mapped through ``t`` into ``v``'s world space and interpolated."""
    if v.kind is VolumeKind.LABEL and mode is not Interp.NEAREST:
        raise DegenerateInput("label volumes must be resampled with nearest-neighbor")
    try:
        inv_affine = np.linalg.inv(v.affine)
    except np.linalg.LinAlgError as exc:
        raise SingularAffine("moving affine is not invertible") from exc

    world = t.apply(_world_coords(fixed_grid))
    vox = world @ inv_affine[:3, :3].T + inv_affine[:3, 3]
    if mode is Interp.NEAREST:
        out = _sample_nearest(v.data, vox, default_value)
    else:
        out = resample_trilinear(v.data.astype(np.float64), vox, float(default_value))
    out = out.reshape(fixed_grid.dims).astype(v.data.dtype)
    return Volume(out, fixed_grid.spacing, fixed_grid.affine, v.kind)


def _sample_nearest(data: np.ndarray, vox: np.ndarray, default: float) -> np.ndarray:
    idx = np.rint(vox).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(data.shape)), axis=1)
    out = np.full(vox.shape[0], default, dtype=data.dtype)
    ii = idx[inside]
    out[inside] = data[ii[:, 0], ii[:, 1], ii[:, 2]]
    return out


class Metric(Enum):
    MEAN_SQUARES = "mean_squares"
    MUTUAL_INFORMATION = "mutual_information"


@dataclass
class RegistrationConfig:
    metric: Metric = Metric.MUTUAL_INFORMATION
    mi_bins: int = 32
    shrink_factors: tuple[int, ...] = (4, 2, 1)
    smoothing_sigmas_mm: tuple[float, ...] = (2.0, 1.0, 0.0)
    step_size: float = 1.0
    max_iterations: int = 200
    tolerance: float = 1e-6
    sampling_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if len(self.shrink_factors) < 1 or any(s < 1 for s in self.shrink_factors):
            raise DegenerateInput("shrink factors must be >= 1")
        if len(self.smoothing_sigmas_mm) != len(self.shrink_factors):
            raise DegenerateInput("one smoothing sigma per pyramid level")
        if not (0.0 < self.sampling_fraction <= 1.0):
            raise DegenerateInput("sampling fraction must be in (0, 1]")


def _shrink(v: Volume, factor: int, sigma_mm: float) -> Volume:
    data = v.data.astype(np.float64)
    if sigma_mm > 0:
        data = ndimage.gaussian_filter(data, [sigma_mm / s for s in v.spacing])
    if factor == 1:
        return v.with_data(data)
    data = data[::factor, ::factor, ::factor]
    affine = v.affine.copy()
    affine[:3, :3] *= factor
    spacing = tuple(s * factor for s in v.spacing)
    return Volume(data, spacing, affine, v.kind)


def _mean_squares(fixed_vals, moving_vals, inside):
    if inside.sum() == 0:
        return np.inf
    diff = fixed_vals[inside] - moving_vals[inside]
    return float(np.mean(diff * diff))


def _neg_mutual_information(fixed_vals, moving_vals, inside, bins, f_range, m_range):
    n = int(inside.sum())
    if n == 0:
        return np.inf
    fv = (fixed_vals[inside] - f_range[0]) / max(f_range[1] - f_range[0], 1e-12) * (bins - 1)
    mv = (moving_vals[inside] - m_range[0]) / max(m_range[1] - m_range[0], 1e-12) * (bins - 1)
    fv = np.clip(fv, 0, bins - 1 - 1e-9)
    mv = np.clip(mv, 0, bins - 1 - 1e-9)
    f0 = fv.astype(np.int64)
    m0 = mv.astype(np.int64)
    wf = fv - f0
    wm = mv - m0
    joint = np.zeros((bins, bins))
    # linear Parzen window: each sample spreads over a 2x2 bin neighbourhood
    for df, pf in ((0, 1.0 - wf), (1, wf)):
        for dm, pm in ((0, 1.0 - wm), (1, wm)):
            np.add.at(joint, (f0 + df, m0 + dm), pf * pm)
    joint /= joint.sum()
    pf_ = joint.sum(axis=1)
    pm_ = joint.sum(axis=0)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / (pf_[:, None] * pm_[None, :])[nz])))
    return -mi


class _LevelProblem:
    """Metric evaluation over a fixed voxel sample at one pyramid level."""

    def __init__(self, fixed: Volume, moving: Volume, cfg: RegistrationConfig, rng):
        self.moving = moving
        self.cfg = cfg
        n_total = int(np.prod(fixed.dims))
        n_samples = max(1, int(round(cfg.sampling_fraction * n_total)))
        flat = rng.choice(n_total, size=min(n_samples, n_total), replace=False)
        idx = np.stack(np.unravel_index(np.sort(flat), fixed.dims), axis=1).astype(np.float64)
        self.fixed_world = idx @ fixed.affine[:3, :3].T + fixed.affine[:3, 3]
        self.fixed_vals = fixed.data.reshape(-1)[np.sort(flat)].astype(np.float64)
        self.inv_moving = np.linalg.inv(moving.affine)
        self.f_range = (float(fixed.data.min()), float(fixed.data.max()))
        self.m_range = (float(moving.data.min()), float(moving.data.max()))
        self.mdata = moving.data.astype(np.float64)

    def value(self, params: np.ndarray, center) -> float:
        t = RigidTransform(tuple(params[:3]), tuple(params[3:]), tuple(center))
        world = t.apply(self.fixed_world)
        vox = world @ self.inv_moving[:3, :3].T + self.inv_moving[:3, 3]
        upper = np.asarray(self.mdata.shape, dtype=np.float64) - 1.0
        inside = np.all((vox >= 0) & (vox <= upper), axis=1)
        moving_vals = resample_trilinear(self.mdata, vox, 0.0)
        if self.cfg.metric is Metric.MEAN_SQUARES:
            return _mean_squares(self.fixed_vals, moving_vals, inside)
        return _neg_mutual_information(
            self.fixed_vals, moving_vals, inside, self.cfg.mi_bins, self.f_range, self.m_range
        )

    def inside_fraction(self, params, center) -> float:
        t = RigidTransform(tuple(params[:3]), tuple(params[3:]), tuple(center))
        vox = t.apply(self.fixed_world) @ self.inv_moving[:3, :3].T + self.inv_moving[:3, 3]
        upper = np.asarray(self.mdata.shape, dtype=np.float64) - 1.0
        return float(np.mean(np.all((vox >= 0) & (vox <= upper), axis=1)))


def register_rigid(
    moving: Volume, fixed: Volume, cfg: RegistrationConfig | None = None
) -> tuple[RigidTransform, float]:
    """Find the rigid transform (fixed world -> moving world) minimising the
    configured metric, by multi-resolution finite-difference gradient descent."""
    cfg = cfg or RegistrationConfig()
    for name, vol in (("moving", moving), ("fixed", fixed)):
        if vol.kind is not VolumeKind.INTENSITY:
            raise DegenerateInput(f"{name} volume must be Intensity kind")
        if float(vol.data.std()) <= 1e-12:
            raise DegenerateInput(f"{name} volume is constant")

    center_vox = (np.asarray(fixed.dims, dtype=np.float64) - 1.0) / 2.0
    center = tuple(fixed.affine[:3, :3] @ center_vox + fixed.affine[:3, 3])
    radius = 0.5 * float(np.linalg.norm(np.asarray(fixed.dims) * np.asarray(fixed.spacing)))
    # rotations scaled by the fixed-volume radius so all 6 axes move in mm
    param_scale = np.array([radius] * 3 + [1.0] * 3)
    fd_step = np.array([1e-3] * 3 + [0.1 * min(moving.spacing)] * 3)

    params = np.zeros(6)
    rng = np.random.default_rng(cfg.seed)
    final_value = np.inf
    for level, (shrink, sigma) in enumerate(zip(cfg.shrink_factors, cfg.smoothing_sigmas_mm)):
        f_level = _shrink(fixed, shrink, sigma)
        m_level = _shrink(moving, shrink, sigma)
        problem = _LevelProblem(f_level, m_level, cfg, rng)
        if level == 0 and problem.inside_fraction(params, center) < 0.01:
            raise NoOverlap("fewer than 1% of samples land inside the moving volume")
        params, final_value = _descend(problem, params, center, cfg, param_scale, fd_step)
    return RigidTransform(tuple(params[:3]), tuple(params[3:]), center), final_value


def _descend(problem, params, center, cfg, param_scale, fd_step):
    value = problem.value(params, center)
    step = cfg.step_size
    for _ in range(cfg.max_iterations):
        grad = np.zeros(6)
        for i in range(6):
            p_plus = params.copy()
            p_minus = params.copy()
            p_plus[i] += fd_step[i]
            p_minus[i] -= fd_step[i]
            grad[i] = (problem.value(p_plus, center) - problem.value(p_minus, center)) / (2 * fd_step[i])
        # gradient in radius-scaled parameter space
        grad_scaled = grad / param_scale
        norm = float(np.linalg.norm(grad_scaled))
        if norm < 1e-15:
            break
        accepted = False
        while step > 1e-6:
            candidate = params - step * (grad_scaled / norm) / param_scale
            cand_value = problem.value(candidate, center)
            if cand_value < value:
                improvement = (value - cand_value) / max(abs(value), 1e-12)
                params, value = candidate, cand_value
                accepted = True
                step = min(step * 1.1, cfg.step_size * 4)
                if improvement < cfg.tolerance:
                    return params, value
                break
            step *= 0.5
        if not accepted:
            break
    return params, value
