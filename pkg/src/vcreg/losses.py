"""Training objectives and the transformation metric.

Frames: ``truth`` maps P1 onto P2 (``y = R x + t``). Virtual points live in
P2's frame, so they are pulled back with ``truth^-1`` before comparing them
with their keypoints in P1::

    P1 frame                      P2 frame
    x_i  <-- truth^-1 --  y_hat_i = sum_j M_ij y_j
         (y_tilde_i)
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import numeric as nm
from .errors import ConfigError, DimensionError
from .geometry import apply, invert, nearest_neighbor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.5
    alpha: float = 1.0
    beta: float = 1e-4
    margin: float = 0.5
    l1_weight: float = 1e-6

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ConfigError(f"{name} must be non-negative, got {value}")

    def to_dict(self):
        return asdict(self)


def pull_back(virtual, truth):
    return apply(invert(truth), virtual)


def label_matches(cs, p1, truth):
    """True where keypoint ``x_i`` is the nearest P1 point to its pulled-back virtual point."""
    y_tilde = pull_back(cs.virtual, truth)
    nearest, _ = nearest_neighbor(y_tilde, p1)
    return nearest == cs.keypoints


def correspondence_loss(cs, labels, p1, truth, cfg=LossConfig()):
    """Mean distance over true matches plus ``gamma`` times the mean over false matches.

    Differentiable through ``cs.virtual_tensor`` when present. A term with no
    members is dropped.
    """
    labels = np.asarray(labels, dtype=bool)
    virtual = cs.virtual_tensor if cs.virtual_tensor is not None else nm.Tensor(cs.virtual)
    if labels.shape != (virtual.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for {virtual.shape[0]} keypoints")
    keys = np.asarray(p1, dtype=np.float64)[cs.keypoints]
    # y_tilde = R^T (y_hat - t), written for row vectors
    y_tilde = (virtual - truth.translation) @ nm.Tensor(truth.rotation)
    dist = nm.norm_rows(y_tilde - keys, axis=1)
    n_cor, n_mis = int(labels.sum()), int((~labels).sum())
    loss = nm.Tensor(0.0)
    if n_cor:
        loss = loss + nm.tsum(dist * labels.astype(float)) * (1.0 / n_cor)
    else:
        log.debug("no true matches; true-match term dropped")
    if n_mis:
        loss = loss + nm.tsum(dist * (~labels).astype(float)) * (cfg.gamma / n_mis)
    else:
        log.debug("no false matches; false-match term dropped")
    return loss


def transformation_loss(estimate, truth):
    """``|R^T R_g - I|_F^2 + |t - t_g|^2``; an evaluation metric, never trained on."""
    rot = estimate.rotation.T @ truth.rotation - np.eye(3)
    return float(np.sum(rot ** 2) + np.sum((estimate.translation - truth.translation) ** 2))


def squared_norm(params):
    total = nm.Tensor(0.0)
    for p in params:
        total = total + nm.tsum(p * p)
    return total


def combined_loss(corr, params, cfg=LossConfig()):
    """``alpha * corr + beta * sum |e|^2`` over all parameters."""
    return corr * cfg.alpha + squared_norm(params) * cfg.beta


def triplet_loss(anchor, positive, negative, margin=0.5, l1_weight=0.0, params=()):
    """Mean over rows of ``max(0, |a-p|^2 - |a-n|^2 + margin)`` plus ``l1_weight * sum |e|``."""
    a, p, n = nm.as_tensor(anchor), nm.as_tensor(positive), nm.as_tensor(negative)
    if not (a.shape == p.shape == n.shape):
        raise DimensionError(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
    if a.ndim == 1:
        a, p, n = (nm.reshape(t, (1, -1)) for t in (a, p, n))
    dp = nm.tsum((a - p) ** 2, axis=1)
    dn = nm.tsum((a - n) ** 2, axis=1)
    loss = nm.mean(nm.relu(dp - dn + margin))
    if l1_weight and params:
        l1 = nm.Tensor(0.0)
        for e in params:
            l1 = l1 + nm.tsum(nm.tabs(e))
        loss = loss + l1 * l1_weight
    return loss
