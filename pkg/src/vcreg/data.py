"""Procedural shapes, perturbations and the pair-generation protocols.

Protocols (``make_pair``):

* ``whole``   downsample to 1024 points, P2 = truth(P1) with rotations in
  [0, 45] degrees per Euler angle and translations in [-0.5, 0.5] m.
* ``noisy``   ``whole`` plus N(0, 0.01^2) noise on P2.
* ``partial`` ``whole`` followed by independent 768-nearest-neighbour crops
  of P1 and P2 around random viewpoints.
* ``scan``    radius crop, RANSAC ground removal, two independent 1024-point
  downsamples and a KITTI-range transform of the second.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError
from .geometry import RigidTransform, apply, as_cloud, euler_to_rotation, farthest_point_sampling

WHOLE_ROTATION = ((0.0, 45.0),) * 3
WHOLE_TRANSLATION = ((-0.5, 0.5),) * 3
# yaw is the first Euler angle (about z); translation ranges as (x, y, z)
SCAN_ROTATION = ((-30.0, 30.0), (-5.0, 5.0), (-5.0, 5.0))
SCAN_TRANSLATION = ((-5.0, 5.0), (-1.0, 1.0), (-5.0, 5.0))

PROTOCOLS = ("whole", "noisy", "partial", "scan")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ----------------------------------------------------------------- transforms


def random_transform(rot_ranges=WHOLE_ROTATION, trans_ranges=WHOLE_TRANSLATION, seed=None):
    """Uniform per-angle (degrees, yaw/pitch/roll order) and per-axis (metres) sampling."""
    rng = _rng(seed)
    for lo, hi in (*rot_ranges, *trans_ranges):
        if lo > hi:
            raise DomainError(f"inverted interval [{lo}, {hi}]")
    angles = [rng.uniform(lo, hi) if hi > lo else float(lo) for lo, hi in rot_ranges]
    trans = [rng.uniform(lo, hi) if hi > lo else float(lo) for lo, hi in trans_ranges]
    return RigidTransform(euler_to_rotation(angles), np.array(trans))


def add_noise(points, sigma, seed=None):
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    pts = as_cloud(points)
    if sigma == 0:
        return pts.copy()
    return pts + _rng(seed).normal(0.0, sigma, size=pts.shape)


def downsample(points, count, seed=None):
    """Uniform random subset of ``count`` rows without replacement."""
    pts = as_cloud(points)
    if not 1 <= count <= len(pts):
        raise DomainError(f"cannot keep {count} of {len(pts)} points")
    return pts[_rng(seed).choice(len(pts), size=count, replace=False)]


def partial_crop(points, count, seed=None, viewpoint=None):
    """Keep the ``count`` points nearest to a viewpoint, nearest first.

    The viewpoint is drawn uniformly from the cloud's bounding box unless given.
    """
    pts = as_cloud(points)
    if not 1 <= count <= len(pts):
        raise DomainError(f"cannot keep {count} of {len(pts)} points")
    if viewpoint is None:
        viewpoint = _rng(seed).uniform(pts.min(axis=0), pts.max(axis=0))
    d = np.sum((pts - np.asarray(viewpoint, dtype=np.float64)) ** 2, axis=1)
    return pts[np.argsort(d, kind="stable")[:count]]


def radius_crop(points, radius=40.0):
    pts = as_cloud(points)
    return pts[np.sum(pts ** 2, axis=1) <= radius ** 2]


class GroundRemovalWarning(UserWarning):
    pass


def fit_plane_ransac(points, dist_thresh=0.3, iters=100, seed=None):
    """Best plane ``(normal, offset)`` by inlier count over random 3-point hypotheses,
    and its inlier mask. Returns ``(None, empty mask)`` if every sample is degenerate."""
    pts = as_cloud(points)
    rng = _rng(seed)
    best, best_mask = None, np.zeros(len(pts), dtype=bool)
    if len(pts) < 3:
        raise DomainError("RANSAC plane fit needs at least 3 points")
    for _ in range(iters):
        a, b, c = pts[rng.choice(len(pts), 3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        offset = -normal @ a
        mask = np.abs(pts @ normal + offset) <= dist_thresh
        if mask.sum() > best_mask.sum():
            best, best_mask = (normal, offset), mask
    return best, best_mask


def remove_ground_ransac(points, dist_thresh=0.3, iters=100, seed=None, inlier_floor=0.2):
    """Drop the inliers of the dominant plane.

    If the best plane holds fewer than ``inlier_floor`` of the points the
    cloud is returned unchanged; if it holds all of them the result is empty
    and a :class:`GroundRemovalWarning` is issued.
    """
    pts = as_cloud(points)
    plane, mask = fit_plane_ransac(pts, dist_thresh, iters, seed)
    if plane is None or mask.mean() < inlier_floor:
        return pts.copy()
    if mask.all():
        warnings.warn("every point lies on the ground plane; nothing left", GroundRemovalWarning, stacklevel=2)
        return np.empty((0, 3))
    return pts[~mask]


# ----------------------------------------------------------------- shapes


def _sphere_dirs(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_ellipsoid(n, rng, axes=(1.0, 1.0, 1.0)):
    return _sphere_dirs(n, rng) * np.asarray(axes)


def sample_box(n, rng, size=(1.0, 1.0, 1.0)):
    size = np.asarray(size, dtype=np.float64)
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]]).repeat(2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * size
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    pts[np.arange(n), axis] = sign * size[axis]
    return pts


def sample_torus(n, rng, major=1.0, minor=0.3):
    u, v = rng.uniform(0, 2 * np.pi, size=(2, n))
    return np.stack([(major + minor * np.cos(v)) * np.cos(u),
                     (major + minor * np.cos(v)) * np.sin(u),
                     minor * np.sin(v)], axis=1)


def sample_cylinder(n, rng, radius=0.3, height=1.0):
    u = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(-height / 2, height / 2, n)
    return np.stack([radius * np.cos(u), radius * np.sin(u), z], axis=1)


def _normalise(pts):
    pts = pts - pts.mean(axis=0)
    return pts / np.linalg.norm(pts, axis=1).max()


def composite_shape(n, rng):
    """Union of 2-4 randomly sized, placed and oriented primitives; generically asymmetric."""
    parts = int(rng.integers(2, 5))
    weights = rng.uniform(0.5, 1.5, parts)
    counts = np.floor(weights / weights.sum() * n).astype(int)
    counts[0] += n - counts.sum()
    chunks = []
    for c in counts:
        kind = rng.integers(4)
        if kind == 0:
            p = sample_ellipsoid(c, rng, rng.uniform(0.15, 0.6, 3))
        elif kind == 1:
            p = sample_box(c, rng, rng.uniform(0.2, 1.0, 3))
        elif kind == 2:
            p = sample_torus(c, rng, rng.uniform(0.3, 0.5), rng.uniform(0.05, 0.15))
        else:
            p = sample_cylinder(c, rng, rng.uniform(0.05, 0.25), rng.uniform(0.4, 1.2))
        rot = euler_to_rotation(rng.uniform(-180, 180, 3))
        chunks.append(p @ rot.T + rng.uniform(-0.6, 0.6, 3))
    return np.concatenate(chunks)


SHAPES = ("sphere", "box", "torus", "composite")


def procedural_shape(kind, n, seed=None):
    """Surface samples of a named shape, centred and scaled into the unit ball."""
    rng = _rng(seed)
    if kind == "sphere":
        pts = sample_ellipsoid(n, rng)
    elif kind == "box":
        pts = sample_box(n, rng, (1.0, 0.7, 0.4))
    elif kind == "torus":
        pts = sample_torus(n, rng)
    elif kind == "composite":
        pts = composite_shape(n, rng)
    else:
        raise DomainError(f"unknown shape {kind!r}; choose from {SHAPES}")
    return _normalise(pts)


def synthetic_scan(seed=None, n_ground=3000, n_objects=12, per_object=150, extent=35.0):
    """A crude lidar-like scene: a ground plane at z=-1.7 plus box/cylinder obstacles."""
    rng = _rng(seed)
    ground = np.column_stack([rng.uniform(-extent, extent, (n_ground, 2)),
                              -1.7 + rng.normal(0, 0.02, n_ground)])
    objs = []
    for _ in range(n_objects):
        centre = np.append(rng.uniform(-extent * 0.8, extent * 0.8, 2), 0.0)
        if rng.random() < 0.5:
            p = sample_box(per_object, rng, rng.uniform([1, 1, 1.5], [5, 3, 3]))
        else:
            p = sample_cylinder(per_object, rng, rng.uniform(0.2, 0.6), rng.uniform(2, 5))
        p[:, 2] -= p[:, 2].min() + 1.3
        objs.append(p + centre)
    return np.concatenate([ground, *objs])


# ----------------------------------------------------------------- protocols


@dataclass(frozen=True)
class ProtocolConfig:
    n_points: int = 1024
    crop_points: int = 768
    noise_sigma: float = 0.01
    rotation: tuple = WHOLE_ROTATION
    translation: tuple = WHOLE_TRANSLATION
    scan_rotation: tuple = SCAN_ROTATION
    scan_translation: tuple = SCAN_TRANSLATION
    scan_radius: float = 40.0
    ransac_thresh: float = 0.3
    ransac_iters: int = 100
    sampler: str = "random"          # random | fps

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class PairSample:
    source: np.ndarray
    target: np.ndarray
    truth: RigidTransform
    protocol: str
    seed: int | None = None
    meta: dict = field(default_factory=dict)


def _subsample(pts, count, rng, sampler):
    if sampler == "fps":
        return pts[farthest_point_sampling(pts, count)]
    return downsample(pts, count, rng)


def make_pair(points, protocol="whole", seed=None, config=ProtocolConfig()):
    """Build a :class:`PairSample` from one cloud. Same inputs and seed give identical output."""
    if protocol not in PROTOCOLS:
        raise DomainError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    pts = as_cloud(points)
    rng = np.random.default_rng(seed)
    c = config
    if protocol == "scan":
        pts = remove_ground_ransac(radius_crop(pts, c.scan_radius), c.ransac_thresh, c.ransac_iters, rng)
        if len(pts) < c.n_points:
            raise DomainError(f"only {len(pts)} non-ground points left, need {c.n_points}")
        p1 = _subsample(pts, c.n_points, rng, "random")
        p2_raw = _subsample(pts, c.n_points, rng, "random")
        truth = random_transform(c.scan_rotation, c.scan_translation, rng)
        return PairSample(p1, apply(truth, p2_raw), truth, protocol, seed)

    n = min(c.n_points, len(pts))
    p1 = _subsample(pts, n, rng, c.sampler)
    truth = random_transform(c.rotation, c.translation, rng)
    p2 = apply(truth, p1)
    if protocol == "noisy":
        p2 = add_noise(p2, c.noise_sigma, rng)
    elif protocol == "partial":
        count = min(c.crop_points, n)
        p1 = partial_crop(p1, count, rng)
        p2 = partial_crop(p2, count, rng)
    return PairSample(p1, p2, truth, protocol, seed)


def easy_config(n_points=128, max_angle=20.0, max_shift=0.5):
    return ProtocolConfig(n_points=n_points, rotation=((0.0, max_angle),) * 3,
                          translation=((-max_shift, max_shift),) * 3)


def toy_pairs(count, n_points=128, seed=0, protocol="whole", config=None, shape="composite"):
    """``count`` seeded pairs built from procedural shapes (self-contained datasets)."""
    config = config or ProtocolConfig(n_points=n_points)
    out = []
    for i in range(count):
        s = int(np.random.default_rng([seed, i]).integers(2**31))
        cloud = procedural_shape(shape, max(n_points, 4 * n_points), s)
        out.append(make_pair(cloud, protocol, s + 1, config))
    return out

