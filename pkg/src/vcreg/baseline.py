"""Point-to-point ICP, used as a baseline and to refine network estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspondence import solve_svd
from .errors import DegenerateGeometryError, DomainError
from .geometry import RigidTransform, apply, as_cloud, compose, nearest_neighbor, rotation_angle


# correspondence cutoff used on the scan protocol, where raw matching is dominated by non-overlap
SCAN_MAX_DISTANCE = 2.0


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 10
    tolerance: float = 1e-10            # stop once a step moves less than this (degrees and metres)
    initial: RigidTransform = field(default_factory=RigidTransform.identity)
    max_correspondence_distance: float | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise DomainError("ICP needs at least one iteration")


def icp(p1, p2, cfg=IcpConfig()):
    """Align ``p1`` onto ``p2``. Returns ``(transform, residuals)``.

    ``residuals[i]`` is the mean-squared nearest-neighbour distance at the
    start of iteration ``i``; the final entry is measured after the last
    update. Without a correspondence-distance cutoff the sequence is
    non-increasing.
    """
    src, dst = as_cloud(p1), as_cloud(p2)
    current = cfg.initial
    residuals = []
    for _ in range(cfg.max_iterations):
        moved = apply(current, src)
        idx, d2 = nearest_neighbor(moved, dst)
        residuals.append(float(d2.mean()))
        keep = np.ones(len(idx), dtype=bool)
        if cfg.max_correspondence_distance is not None:
            keep = d2 <= cfg.max_correspondence_distance ** 2
        if np.unique(idx[keep]).size < 3:
            raise DegenerateGeometryError(f"ICP matched onto only {np.unique(idx[keep]).size} distinct target points")
        step = solve_svd(moved[keep], dst[idx[keep]])
        current = compose(step, current)
        if rotation_angle(step.rotation) < cfg.tolerance and np.linalg.norm(step.translation) < cfg.tolerance:
            break
    _, d2 = nearest_neighbor(apply(current, src), dst)
    residuals.append(float(d2.mean()))
    return current, residuals


def refine(estimate, p1, p2, cfg=IcpConfig()):
    """Run ICP starting from ``estimate`` and return the refined transform."""
    cfg = IcpConfig(cfg.max_iterations, cfg.tolerance, estimate, cfg.max_correspondence_distance)
    return icp(p1, p2, cfg)[0]
