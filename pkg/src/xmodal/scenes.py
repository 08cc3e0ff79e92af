"""Procedural paired RGB/thermal scenes with exact ground-truth depth.

Scenes are simple primitive arrangements (a background plane plus spheres
and boxes) ray-cast from both cameras of a randomized rig. RGB intensity is
Lambertian-shaded albedo; thermal intensity is the normalized temperature
of the hit primitive. Thermal images are rendered at twice the thermal
sensor resolution and only reach sensor resolution through degrade(), which
also applies the scenario-specific corruption (dim noisy RGB at night,
blur and noise in rain, a soft thermal sensor during the day).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import bilinear_resize_array
from .geometry import CameraRig, DepthMap, ExtrinsicsSE3, Intrinsics

SCENARIOS = ("day", "night", "rain")
RAY_EPS = 1e-9
_TO_LIGHT = np.array([-0.3, -0.45, -0.84])
_TO_LIGHT = _TO_LIGHT / np.linalg.norm(_TO_LIGHT)

THERMAL_RENDER_SCALE = 2  # sensor resolution is reached in degrade()


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    albedo: tuple[float, float, float]
    temperature: float


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    temperature: float


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extent: tuple[float, float, float]
    albedo: tuple[float, float, float]
    temperature: float


Primitive = Plane | Sphere | Box


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...]
    ambient_light: float
    rig: CameraRig
    scenario: str
    seed: int

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")


@dataclass
class SceneSample:
    i_rgb: np.ndarray       # [3,H,W] in [0,1]
    i_thr: np.ndarray       # [1,h,w] in [0,1]
    d_gt_rgb: DepthMap
    d_gt_thr: DepthMap
    rig: CameraRig
    scenario: str
    seed: int


def _intersect(prim: Primitive, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Ray parameter per pixel (inf where missed); dirs has unit z in the
    camera frame, so the parameter equals Z-depth directly."""
    if isinstance(prim, Plane):
        n = np.asarray(prim.normal)
        denom = dirs @ n
        t = ((np.asarray(prim.point) - origin) @ n) / np.where(np.abs(denom) < 1e-12, np.nan, denom)
        return np.where(np.isfinite(t) & (t > RAY_EPS), t, np.inf)
    if isinstance(prim, Sphere):
        oc = origin - np.asarray(prim.center)
        a = np.einsum("hwc,hwc->hw", dirs, dirs)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - prim.radius ** 2
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t_near = (-b - sq) / (2.0 * a)
        t_far = (-b + sq) / (2.0 * a)
        t = np.where(t_near > RAY_EPS, t_near, t_far)
        return np.where(hit & (t > RAY_EPS), t, np.inf)
    if isinstance(prim, Box):
        c = np.asarray(prim.center)
        h = np.asarray(prim.half_extent)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (c - h - origin) * inv
            t2 = (c + h - origin) * inv
        t_near = np.nanmax(np.minimum(t1, t2), axis=-1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = (t_near <= t_far) & (t_far > RAY_EPS)
        t = np.where(t_near > RAY_EPS, t_near, t_far)
        return np.where(hit, t, np.inf)
    raise TypeError(f"unknown primitive {type(prim).__name__}")


def _normals(prim: Primitive, hits: np.ndarray) -> np.ndarray:
    if isinstance(prim, Plane):
        return np.broadcast_to(np.asarray(prim.normal), hits.shape)
    if isinstance(prim, Sphere):
        return (hits - np.asarray(prim.center)) / prim.radius
    if isinstance(prim, Box):
        rel = (hits - np.asarray(prim.center)) / np.asarray(prim.half_extent)
        axis = np.argmax(np.abs(rel), axis=-1)
        n = np.zeros_like(rel)
        rows = np.arange(rel.shape[0])
        n[rows, axis] = np.sign(rel[rows, axis])
        return n
    raise TypeError(f"unknown primitive {type(prim).__name__}")


def _render_view(spec: SceneSpec, k: Intrinsics, cam_r: np.ndarray,
                 cam_c: np.ndarray):
    """Ray-cast one view: (depth, rgb [3,h,w], thermal [1,h,w])."""
    h, w = k.height, k.width
    us = (np.arange(w) - k.cx) / k.fx
    vs = (np.arange(h) - k.cy) / k.fy
    dirs_cam = np.empty((h, w, 3))
    dirs_cam[..., 0] = us[None, :]
    dirs_cam[..., 1] = vs[:, None]
    dirs_cam[..., 2] = 1.0
    dirs = dirs_cam @ cam_r.T

    ts = np.stack([_intersect(p, cam_c, dirs) for p in spec.primitives])
    idx = np.argmin(ts, axis=0)
    depth = np.take_along_axis(ts, idx[None], axis=0)[0]
    hit_any = np.isfinite(depth)
    if not hit_any.any():
        raise ValueError("no primitive is visible in this view (degenerate scene)")

    temps = np.array([p.temperature for p in spec.primitives])
    t_lo, t_hi = temps.min(), temps.max()
    temps_norm = (temps - t_lo) / (t_hi - t_lo) if t_hi > t_lo else np.full_like(temps, 0.5)
    albedos = np.array([p.albedo for p in spec.primitives])

    rgb = np.zeros((h, w, 3))
    thermal = np.zeros((h, w))
    for pi, prim in enumerate(spec.primitives):
        mask = hit_any & (idx == pi)
        if not mask.any():
            continue
        t_hit = depth[mask]
        hits = cam_c + dirs[mask] * t_hit[:, None]
        n = _normals(prim, hits)
        view = dirs[mask]
        flip = np.einsum("nc,nc->n", n, view) > 0
        n = np.where(flip[:, None], -n, n)
        lambert = np.maximum(0.0, n @ _TO_LIGHT)
        shade = spec.ambient_light + (1.0 - spec.ambient_light) * lambert
        rgb[mask] = albedos[pi] * shade[:, None]
        thermal[mask] = temps_norm[pi]

    depth = np.where(hit_any, depth, 0.0)
    return (DepthMap(depth, hit_any),
            np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1),
            np.clip(thermal, 0.0, 1.0)[None])


def render_scene(spec: SceneSpec) -> SceneSample:
    """Render both views; thermal intensity is supersampled (see degrade)."""
    rig = spec.rig
    d_rgb, rgb, _ = _render_view(spec, rig.k_rgb, np.eye(3), np.zeros(3))
    k_thr_render = rig.k_thr.scaled(THERMAL_RENDER_SCALE, THERMAL_RENDER_SCALE)
    e = rig.e_thr_to_rgb
    _, _, thr = _render_view(spec, k_thr_render, e.rotation, e.translation)
    d_thr, _, _ = _render_view(spec, rig.k_thr, e.rotation, e.translation)
    return SceneSample(i_rgb=rgb, i_thr=thr, d_gt_rgb=d_rgb, d_gt_thr=d_thr,
                       rig=rig, scenario=spec.scenario, seed=spec.seed)


def _box_blur(img: np.ndarray, k: int) -> np.ndarray:
    """k x k uniform blur with edge replication, per channel."""
    pad = k // 2
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    return win.mean(axis=(-2, -1))


def degrade(sample: SceneSample) -> SceneSample:
    """Apply scenario corruption and bring thermal to sensor resolution.

    Ground-truth depth is never touched. Thermal is always downsampled to
    the rig's thermal extents; day and rain additionally soften and noise
    it, while night leaves the thermal signal clean and crushes RGB.
    """
    rng = np.random.default_rng(np.random.SeedSequence((sample.seed, 0x5EED)))
    rgb = sample.i_rgb
    thr = sample.i_thr
    scenario = sample.scenario

    if scenario == "night":
        rgb = rgb * 0.08 + rng.normal(0.0, 0.05, rgb.shape)
    elif scenario == "rain":
        rgb = _box_blur(rgb, 5) + rng.normal(0.0, 0.03, rgb.shape)
        thr = _box_blur(thr, 3) + rng.normal(0.0, 0.02, thr.shape)
    else:  # day
        thr = _box_blur(thr, 3) + rng.normal(0.0, 0.02, thr.shape)

    k = sample.rig.k_thr
    thr = bilinear_resize_array(thr, k.height, k.width)
    return replace(sample,
                   i_rgb=np.clip(rgb, 0.0, 1.0),
                   i_thr=np.clip(thr, 0.0, 1.0))


# -- randomized corpus --------------------------------------------------------


def _rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    k = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def random_rig(rng: np.random.Generator, rgb_hw: tuple[int, int]) -> CameraRig:
    """A rig with distinct intrinsics, half-resolution thermal camera, and a
    small baseline (0.05 to 0.2 m) with a gentle rotation."""
    h, w = rgb_hw
    fx = w * rng.uniform(0.8, 1.1)
    k_rgb = Intrinsics(fx=fx, fy=fx * rng.uniform(0.97, 1.03),
                       cx=w / 2 + rng.uniform(-1.5, 1.5),
                       cy=h / 2 + rng.uniform(-1.5, 1.5), width=w, height=h)
    ht, wt = h // 2, w // 2
    fxt = fx / 2 * rng.uniform(0.9, 1.1)
    k_thr = Intrinsics(fx=fxt, fy=fxt * rng.uniform(0.97, 1.03),
                       cx=wt / 2 + rng.uniform(-1.0, 1.0),
                       cy=ht / 2 + rng.uniform(-1.0, 1.0), width=wt, height=ht)
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, math.radians(1.5))
    rot = _rotation_from_axis_angle(axis, angle)
    direction = rng.normal(size=3)
    direction[2] *= 0.25
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.05, 0.2)
    return CameraRig(k_rgb=k_rgb, k_thr=k_thr,
                     e_thr_to_rgb=ExtrinsicsSE3(rot, t))


def random_scene_spec(rng: np.random.Generator, scenario: str, seed: int,
                      rgb_hw: tuple[int, int] = (64, 64)) -> SceneSpec:
    """A background plane plus 1-5 objects, all depths inside [2, 20] m."""
    rig = random_rig(rng, rgb_hw)

    def albedo():
        return tuple(rng.uniform(0.15, 1.0, size=3))

    prims: list[Primitive] = [Plane(
        point=(0.0, 0.0, rng.uniform(12.0, 16.5)),
        normal=(rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12), -1.0),
        albedo=albedo(), temperature=rng.uniform(0.0, 0.35))]
    for _ in range(int(rng.integers(1, 6))):
        z = rng.uniform(2.6, 11.0)
        x = z * rng.uniform(-0.28, 0.28)
        y = z * rng.uniform(-0.28, 0.28)
        temp = rng.uniform(0.3, 1.0)
        if rng.random() < 0.5:
            radius = min(rng.uniform(0.3, 1.2), z - 2.3)
            prims.append(Sphere(center=(x, y, z), radius=radius,
                                albedo=albedo(), temperature=temp))
        else:
            he = rng.uniform(0.25, 0.9, size=3)
            he[2] = min(he[2], z - 2.3)
            prims.append(Box(center=(x, y, z), half_extent=tuple(he),
                             albedo=albedo(), temperature=temp))
    return SceneSpec(primitives=tuple(prims),
                     ambient_light=rng.uniform(0.25, 0.55),
                     rig=rig, scenario=scenario, seed=seed)


def _scenario_schedule(n: int, mix: dict[str, float],
                       rng: np.random.Generator) -> list[str]:
    """Exact largest-remainder counts per scenario, shuffled."""
    quotas = {s: n * mix.get(s, 0.0) for s in SCENARIOS}
    counts = {s: int(q) for s, q in quotas.items()}
    short = n - sum(counts.values())
    leftovers = sorted(SCENARIOS, key=lambda s: quotas[s] - counts[s], reverse=True)
    for s in leftovers[:short]:
        counts[s] += 1
    schedule = [s for s in SCENARIOS for _ in range(counts[s])]
    rng.shuffle(schedule)
    return schedule


def generate_corpus(n: int, split_ratios: tuple[float, float, float],
                    master_seed: int, scenario_mix: dict[str, float],
                    out_dir, rgb_hw: tuple[int, int] = (64, 64)):
    """Render, degrade, and write n scenes in the dataset layout.

    Splits are disjoint contiguous index ranges over a scenario-shuffled
    schedule; every sample's randomness derives from (master_seed, index),
    so regeneration is byte-identical and order-independent.
    """
    from . import dataio

    if n < 3:
        raise ValueError("need at least 3 samples")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    if abs(sum(scenario_mix.values()) - 1.0) > 1e-6 or \
            any(s not in SCENARIOS for s in scenario_mix):
        raise ValueError("scenario mix must cover day/night/rain and sum to 1")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = _scenario_schedule(
        n, scenario_mix, np.random.default_rng(np.random.SeedSequence((master_seed, 0x51))))
    n_train = int(n * split_ratios[0])
    n_val = int(n * split_ratios[1])

    for i, scenario in enumerate(schedule):
        rng = np.random.default_rng(np.random.SeedSequence((master_seed, i)))
        seed = int(rng.integers(0, 2 ** 62))
        spec = random_scene_spec(rng, scenario=scenario, seed=seed, rgb_hw=rgb_hw)
        sample = degrade(render_scene(spec))
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        dataio.write_sample(out_dir / split / f"{i:05d}_{scenario}", sample)
    return dataio.load_dataset_index(out_dir)
