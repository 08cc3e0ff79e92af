"""Pinhole cameras, SE(3) transforms, and cross-view depth warping.

The rig convention is fixed: extrinsics map points from the thermal camera
frame into the RGB camera frame. Depth always means Z-depth, the distance
along the optical axis. Warping back-projects every valid thermal pixel,
applies the rigid transform, reprojects with the RGB intrinsics, and then
forward-splats values onto the nearest integer RGB pixel with a z-buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ROTATION_TOL = 1e-6
MIN_PROJECT_Z = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole parameters: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        """Intrinsics of the same camera sampled on a rescaled pixel grid."""
        return Intrinsics(fx=self.fx * sx, fy=self.fy * sy,
                          cx=(self.cx + 0.5) * sx - 0.5,
                          cy=(self.cy + 0.5) * sy - 0.5,
                          width=int(round(self.width * sx)),
                          height=int(round(self.height * sy)))


@dataclass(frozen=True)
class ExtrinsicsSE3:
    """Rigid transform taking thermal-frame points into the RGB frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        err = np.max(np.abs(r.T @ r - np.eye(3)))
        if err >= ROTATION_TOL or abs(np.linalg.det(r) - 1.0) >= ROTATION_TOL:
            raise ValueError("rotation is not orthonormal with determinant 1")
        # Snap to the nearest exact rotation so downstream identities hold
        # to machine precision even for coarsely printed calibration text.
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] *= -1.0
            r = u @ vt
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "ExtrinsicsSE3":
        return ExtrinsicsSE3(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N,3) point array."""
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "ExtrinsicsSE3":
        rt = self.rotation.T
        return ExtrinsicsSE3(rt, -rt @ self.translation)


@dataclass(frozen=True)
class CameraRig:
    k_rgb: Intrinsics
    k_thr: Intrinsics
    e_thr_to_rgb: ExtrinsicsSE3


@dataclass
class DepthMap:
    """Per-pixel metric depth with a validity mask; invalid entries are 0."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise ValueError("values and valid must be matching H x W arrays")
        if np.any(values[valid] <= 0):
            raise ValueError("valid depth entries must be positive")
        values = np.where(valid, values, 0.0)
        self.values = values
        self.valid = valid

    @staticmethod
    def full(values: np.ndarray) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return DepthMap(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def back_project(p: tuple[float, float], d: float, k: Intrinsics) -> np.ndarray:
    """Lift pixel (u, v) at depth d to a 3-d point in the camera frame."""
    if d <= 0:
        raise ValueError("depth must be positive")
    u, v = p
    return np.array([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])


def project(point: np.ndarray, k: Intrinsics) -> tuple[float, float]:
    """Project a camera-frame 3-d point to pixel coordinates (may be out of bounds)."""
    x, y, z = float(point[0]), float(point[1]), float(point[2])
    if z <= MIN_PROJECT_Z:
        raise ValueError("point is behind or on the camera plane")
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy)


@dataclass
class WarpCoords:
    """RGB-view coordinates and depth for each thermal pixel."""

    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    valid: np.ndarray
    source_shape: tuple[int, int] = field(init=False)

    def __post_init__(self):
        self.source_shape = self.u.shape


def _thermal_rays(k: Intrinsics, shape: tuple[int, int]):
    h, w = shape
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    ax = (us - k.cx) / k.fx
    ay = (vs - k.cy) / k.fy
    return np.broadcast_to(ax[None, :], (h, w)), np.broadcast_to(ay[:, None], (h, w))


def warp_coords_thr_to_rgb(d_thr: DepthMap, rig: CameraRig) -> WarpCoords:
    """Map every valid thermal pixel into the RGB view.

    Back-projects with the thermal intrinsics, applies the rig transform,
    and reprojects with the RGB intrinsics. Pixels that land behind the RGB
    camera are marked invalid; out-of-bounds coordinates are kept and left
    to the splatting stage to discard.
    """
    h, w = d_thr.shape
    if (rig.k_thr.height, rig.k_thr.width) != (h, w):
        raise ValueError("depth extents do not match thermal intrinsics")
    ax, ay = _thermal_rays(rig.k_thr, (h, w))
    d = d_thr.values
    x = ax * d
    y = ay * d
    r = rig.e_thr_to_rgb.rotation
    t = rig.e_thr_to_rgb.translation
    xp = r[0, 0] * x + r[0, 1] * y + r[0, 2] * d + t[0]
    yp = r[1, 0] * x + r[1, 1] * y + r[1, 2] * d + t[1]
    zp = r[2, 0] * x + r[2, 1] * y + r[2, 2] * d + t[2]
    valid = d_thr.valid & (zp > MIN_PROJECT_Z)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(valid, rig.k_rgb.fx * xp / zp + rig.k_rgb.cx, -1.0)
        v = np.where(valid, rig.k_rgb.fy * yp / zp + rig.k_rgb.cy, -1.0)
    return WarpCoords(u=u, v=v, z=np.where(valid, zp, 0.0), valid=valid)


def _zbuffer_winners(coords: WarpCoords, target_hw: tuple[int, int]):
    """Winning (target, source) flat index pairs after z-buffered splatting.

    Nearest-integer rounding; collisions keep the smallest depth, exact ties
    keep the earlier source pixel in row-major order.
    """
    th, tw = target_hw
    ii = np.floor(coords.u + 0.5).astype(np.int64)
    jj = np.floor(coords.v + 0.5).astype(np.int64)
    ok = coords.valid & (ii >= 0) & (ii < tw) & (jj >= 0) & (jj < th)
    src = np.flatnonzero(ok.ravel())
    if src.size == 0:
        return (np.empty(0, dtype=np.int64),) * 2
    tgt = (jj.ravel()[src] * tw + ii.ravel()[src])
    z = coords.z.ravel()[src]
    order = np.lexsort((src, z, tgt))
    tgt_sorted = tgt[order]
    first = np.ones(tgt_sorted.size, dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    return tgt_sorted[first], src[order][first]


def splat_depth(d_thr: DepthMap, coords: WarpCoords, rgb_extent: tuple[int, int]) -> DepthMap:
    """Forward-splat RGB-frame depths onto the RGB pixel grid."""
    th, tw = rgb_extent
    tgt, src = _zbuffer_winners(coords, rgb_extent)
    values = np.zeros(th * tw)
    valid = np.zeros(th * tw, dtype=bool)
    values[tgt] = coords.z.ravel()[src]
    valid[tgt] = True
    return DepthMap(values.reshape(th, tw), valid.reshape(th, tw))


def resample_image(img: np.ndarray, coords: WarpCoords,
                   target_extent: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Carry image values along the depth splat (winner takes the pixel).

    Returns the resampled [C,H,W] image and the shared validity mask; holes
    are zero-filled and flagged invalid.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[1:] != coords.source_shape:
        raise ValueError("image extents do not match the warp source")
    th, tw = target_extent
    tgt, src = _zbuffer_winners(coords, target_extent)
    c = img.shape[0]
    out = np.zeros((c, th * tw))
    out[:, tgt] = img.reshape(c, -1)[:, src]
    valid = np.zeros(th * tw, dtype=bool)
    valid[tgt] = True
    return out.reshape(c, th, tw), valid.reshape(th, tw)


def splat_depth_tensor(d_thr: "ad.Tensor", valid_src: np.ndarray, rig: CameraRig,
                       rgb_extent: tuple[int, int]) -> tuple["ad.Tensor", np.ndarray]:
    """Differentiable depth splat for a [1,h,w] or [h,w] prediction tensor.

    Winner selection runs on detached values; the deposited depth is the
    affine function of the source depth implied by the rigid transform, so
    gradients reach the thermal depth prediction. Returns a [1,H,W] tensor
    (holes are zero) plus the validity mask.
    """
    data = d_thr.data.reshape(d_thr.data.shape[-2:])
    h, w = data.shape
    valid_src = np.broadcast_to(np.asarray(valid_src, dtype=bool), (h, w))
    safe = np.where(valid_src & (data > 0), data, 0.0)
    coords = warp_coords_thr_to_rgb(
        DepthMap(safe, valid_src & (data > 0)), rig)
    th, tw = rgb_extent
    tgt, src = _zbuffer_winners(coords, rgb_extent)
    valid = np.zeros(th * tw, dtype=bool)
    valid[tgt] = True

    if tgt.size == 0:
        return ad.Tensor(np.zeros((1, th, tw))), valid.reshape(th, tw)

    ax, ay = _thermal_rays(rig.k_thr, (h, w))
    r = rig.e_thr_to_rgb.rotation
    t = rig.e_thr_to_rgb.translation
    # Per-source-pixel slope of RGB-frame depth in the source depth.
    slope = (r[2, 0] * ax + r[2, 1] * ay + r[2, 2]).ravel()[src]
    flat = ad.reshape(d_thr, (h * w,))
    picked = ad.gather_flat(flat, src)
    z_values = picked * ad.Tensor(slope) + t[2]
    out = ad.scatter_flat(z_values, tgt, th * tw)
    return ad.reshape(out, (1, th, tw)), valid.reshape(th, tw)


def cross_view_consistency(d_thr: DepthMap, d_rgb: DepthMap, rig: CameraRig,
                           rel_tol: float = 0.005) -> tuple[float, int]:
    """Fraction of well-posed splatted pixels agreeing with RGB-view depth.

    A splatted pixel enters the comparison when the RGB ground truth is
    locally smooth (4-neighborhood within 1% of the center, which excludes
    depth discontinuities where half-pixel rounding is meaningless) and the
    splatted value is not behind the visible surface (occluded). Returns
    (fraction within rel_tol, number of pixels considered).
    """
    coords = warp_coords_thr_to_rgb(d_thr, rig)
    splat = splat_depth(d_thr, coords, d_rgb.shape)
    h, w = d_rgb.shape
    gt = d_rgb.values
    smooth = d_rgb.valid.copy()
    smooth[0, :] = smooth[-1, :] = smooth[:, 0] = smooth[:, -1] = False
    interior = smooth.copy()
    for dj, di in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb = np.roll(gt, (dj, di), axis=(0, 1))
        nb_valid = np.roll(d_rgb.valid, (dj, di), axis=(0, 1))
        with np.errstate(invalid="ignore", divide="ignore"):
            interior &= nb_valid & (np.abs(nb - gt) <= 0.01 * np.abs(gt))
    considered = splat.valid & interior & (splat.values <= gt * 1.02)
    n = int(considered.sum())
    if n == 0:
        return 1.0, 0
    err = np.abs(splat.values[considered] - gt[considered]) / gt[considered]
    return float(np.mean(err <= rel_tol)), n
