"""Procedural indoor scenes and overlapping fragment pairs.

A scene is a box room (floor and walls) with extra horizontal slabs and
ellipsoidal blobs. Fragments are spherical crops around two viewpoints; the
viewpoint separation is searched so the achieved overlap meets the target.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Pair
from .errors import GenerationError, InvalidArgument
from .fusion import synth_aux_modality
from .geom import PointCloud, RigidTransform, SpatialIndex, random_rotation

PRESETS = {
    "match": (0.4, 0.8),
    "lomatch": (0.1, 0.3),
}


@dataclass(frozen=True)
class SynthSceneConfig:
    extent: float = 3.0
    plane_count: int = 3
    blob_count: int = 4
    points_per_fragment: int = 2048
    overlap: float = 0.6
    noise: float = 0.005
    rot_max_deg: float = 15.0
    trans_max: float = 0.5
    tau_pos: float = 0.05
    crop_radius: float = 1.3

    def __post_init__(self):
        if not (self.extent > 0 and self.points_per_fragment > 0 and self.crop_radius > 0):
            raise InvalidArgument("extent, points_per_fragment and crop_radius must be positive")
        if self.plane_count < 0 or self.blob_count < 0 or self.noise < 0:
            raise InvalidArgument("counts and noise must be non-negative")
        if not 0 < self.overlap <= 1:
            raise InvalidArgument(f"overlap must be in (0, 1], got {self.overlap}")


def _sample_rect(rng, n, origin, u, v):
    a, b = rng.random((2, n))
    return origin + a[:, None] * u + b[:, None] * v


def build_scene(cfg: SynthSceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Dense surface samples of one room, in a random but fixed order."""
    E = cfg.extent
    H = 0.8 * E
    density = 1400.0  # points per square metre
    parts = []
    surfaces = [
        (np.zeros(3), np.array([E, 0, 0]), np.array([0, E, 0])),            # floor
        (np.zeros(3), np.array([E, 0, 0]), np.array([0, 0, H])),            # walls
        (np.zeros(3), np.array([0, E, 0]), np.array([0, 0, H])),
        (np.array([0, E, 0]), np.array([E, 0, 0]), np.array([0, 0, H])),
        (np.array([E, 0, 0]), np.array([0, E, 0]), np.array([0, 0, H])),
    ]
    # repeated slabs of identical size: geometrically ambiguous on purpose
    w, d = rng.uniform(0.5, 0.9), rng.uniform(0.4, 0.7)
    for _ in range(cfg.plane_count):
        o = np.array([rng.uniform(0.1, E - w - 0.1), rng.uniform(0.1, E - d - 0.1), rng.uniform(0.3, 0.9)])
        surfaces.append((o, np.array([w, 0, 0]), np.array([0, d, 0])))
    for o, u, v in surfaces:
        area = np.linalg.norm(np.cross(u, v))
        parts.append(_sample_rect(rng, int(area * density), o, u, v))
    for _ in range(cfg.blob_count):
        radii = rng.uniform(0.12, 0.35, size=3)
        centre = np.array([rng.uniform(0.4, E - 0.4), rng.uniform(0.4, E - 0.4), radii[2]])
        # ellipsoid surface area (Knud Thomsen approximation)
        p = 1.6075
        a, b, c = radii
        area = 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)
        dirs = rng.normal(size=(int(area * density), 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        parts.append(centre + dirs * radii)
    pts = np.concatenate(parts)
    return pts[rng.permutation(len(pts))]


def _crop(scene: np.ndarray, centre: np.ndarray, radius: float, n: int) -> np.ndarray:
    """Indices of the first ``n`` scene points (scene order) inside the ball."""
    inside = np.flatnonzero(((scene - centre) ** 2).sum(axis=1) <= radius * radius)
    return inside[:n]


def overlap_fraction(src: np.ndarray, dst: np.ndarray, T: RigidTransform, tau: float) -> float:
    """Share of source points with a target point within ``tau`` under ``T``."""
    if len(src) == 0 or len(dst) == 0:
        return 0.0
    d, _ = SpatialIndex(dst).nearest(T.apply(src))
    return float(np.mean(d < tau))


def gen_pair(cfg: SynthSceneConfig, seed: int, max_retries: int = 6):
    """Generate (src, dst, T_gt, achieved_overlap) with dst = T_gt(src) on the overlap."""
    rng = np.random.default_rng([seed, 0x5CE])
    scene = build_scene(cfg, rng)
    E = cfg.extent
    n, r = cfg.points_per_fragment, cfg.crop_radius
    ident = RigidTransform.identity()
    for attempt in range(max_retries):
        c1 = np.array([rng.uniform(0.35 * E, 0.65 * E), rng.uniform(0.35 * E, 0.65 * E), rng.uniform(0.3, 0.6)])
        ang = rng.uniform(0, 2 * np.pi)
        u = np.array([np.cos(ang), np.sin(ang), 0.0])
        a_idx = _crop(scene, c1, r, n)
        if len(a_idx) < 3:
            continue
        A = scene[a_idx]

        def ov(delta):
            B = scene[_crop(scene, c1 + delta * u, r, n)]
            return overlap_fraction(A, B, ident, cfg.tau_pos), B

        lo, hi = 0.0, 2.0 * r
        best = None
        for _ in range(16):
            mid = 0.5 * (lo + hi) if best is not None else 0.0
            if cfg.overlap >= 1.0:
                mid = 0.0
            o, B = ov(mid)
            if best is None or abs(o - cfg.overlap) < abs(best[0] - cfg.overlap):
                best = (o, B, mid)
            if cfg.overlap >= 1.0 or abs(o - cfg.overlap) < 0.01:
                break
            if o > cfg.overlap:
                lo = mid
            else:
                hi = mid
        o, B, _ = best
        if abs(o - cfg.overlap) > 0.1 or len(B) < 3:
            continue
        R = random_rotation(rng, np.deg2rad(cfg.rot_max_deg))
        t = rng.uniform(-1, 1, size=3)
        t *= rng.uniform(0, cfg.trans_max) / max(np.linalg.norm(t), 1e-12)
        T = RigidTransform(R, t)
        color_seed = int(rng.integers(2 ** 31))
        aux_a = synth_aux_modality(PointCloud(A), color_seed)
        aux_b = synth_aux_modality(PointCloud(B), color_seed)
        if cfg.noise > 0:
            A = A + rng.normal(0, cfg.noise, A.shape)
            B = B + rng.normal(0, cfg.noise, B.shape)
        src = PointCloud(A, aux_a)
        dst = PointCloud(T.apply(B), aux_b)
        achieved = overlap_fraction(src.points, dst.points, T, cfg.tau_pos)
        return src, dst, T, achieved
    raise GenerationError(f"could not reach overlap {cfg.overlap} after {max_retries} attempts (seed {seed})")


def preset_config(preset: str, **overrides) -> SynthSceneConfig:
    if preset not in PRESETS:
        raise InvalidArgument(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return replace(SynthSceneConfig(), **overrides)


def make_dataset(preset: str, n_pairs: int, seed: int, **overrides) -> list[Pair]:
    """``n_pairs`` pairs whose overlap targets are drawn from the preset range."""
    base = preset_config(preset, **overrides)
    lo, hi = PRESETS[preset]
    rng = np.random.default_rng([seed, 0xDA7A])
    pairs = []
    for i in range(n_pairs):
        target = float(rng.uniform(lo, hi))
        pair_seed = int(rng.integers(2 ** 31))
        src, dst, T, ov = gen_pair(replace(base, overlap=target), pair_seed)
        pairs.append(Pair(src, dst, T, f"{preset}_{seed}_{i:04d}", f"scene_{pair_seed}", ov))
    return pairs
