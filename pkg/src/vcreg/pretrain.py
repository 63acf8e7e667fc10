"""Self-supervised pre-training of the feature extractor with FPS-anchored triplets.

For a cloud P1 and a known rigid transform, P2 = T(P1) keeps the row order,
so point i of P1 corresponds to point i of P2. Anchors are farthest-point
samples of P1, positives are the same indices in P2, and negatives are drawn
from the m points of P1 farthest from each anchor (mapped into P2 by index).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .data import WHOLE_ROTATION, WHOLE_TRANSLATION, random_transform
from .errors import DomainError, TrainingDiverged
from .features import extract_features
from .geometry import RigidTransform, apply, as_cloud, farthest_point_sampling, pairwise_sq_dists
from .losses import LossConfig, triplet_loss

log = logging.getLogger(__name__)


@dataclass
class TripletBatch:
    anchors: np.ndarray          # k indices into P1
    positives: np.ndarray        # k indices into P2 (equal to anchors)
    negatives: np.ndarray        # k indices into P2, one per anchor
    negative_pool: np.ndarray    # k x m farthest indices per anchor, farthest first
    transform: RigidTransform
    target: np.ndarray           # P2 = transform(P1)


def build_triplets(p1, t, k, m, seed=None):
    """Triplets for one cloud; deterministic given (cloud, transform, k, m, seed)."""
    pts = as_cloud(p1)
    n = len(pts)
    if not 1 <= k <= n:
        raise DomainError(f"cannot pick {k} anchors from {n} points")
    if not 1 <= m < n:
        raise DomainError(f"need 1 <= m < N for negatives, got m={m}, N={n}")
    anchors = farthest_point_sampling(pts, k)
    d = pairwise_sq_dists(pts[anchors], pts)
    # farthest first; ties broken towards the lower index
    pool = np.argsort(-d, axis=1, kind="stable")[:, :m]
    rng = np.random.default_rng(seed)
    pick = rng.integers(m, size=k)
    negatives = pool[np.arange(k), pick]
    return TripletBatch(anchors, anchors.copy(), negatives, pool, t, apply(t, pts))


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.01
    anchors: int = 128
    farthest: int = 16
    seed: int = 0
    rotation: tuple = WHOLE_ROTATION
    translation: tuple = WHOLE_TRANSLATION
    loss: LossConfig = field(default_factory=LossConfig)


def triplet_step_loss(params, batch, source, cfg):
    r1 = extract_features(source, params)
    r2 = extract_features(batch.target, params)
    return triplet_loss(nm.take(r1, batch.anchors), nm.take(r2, batch.positives),
                        nm.take(r2, batch.negatives), cfg.loss.margin, cfg.loss.l1_weight,
                        params.parameters())


def pretrain_features(params, clouds, cfg=PretrainConfig(), log_path=None):
    """Train ``params`` (a FeatureNetParams) in place with the triplet loss.

    Every step draws a fresh transform for one cloud. Returns the list of
    per-epoch mean losses. Only feature parameters are touched.
    """
    clouds = [as_cloud(c) for c in clouds]
    if not clouds:
        raise DomainError("pre-training needs at least one cloud")
    rng = np.random.default_rng(cfg.seed)
    plist = params.parameters()
    epoch_losses = []
    handle = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(handle) if handle else None
    if writer:
        writer.writerow(("step", "epoch", "cloud", "triplet_loss"))
    step = 0
    try:
        for epoch in range(cfg.epochs):
            losses = []
            for i in rng.permutation(len(clouds)):
                cloud = clouds[i]
                t = random_transform(cfg.rotation, cfg.translation, rng)
                k = min(cfg.anchors, len(cloud))
                m = min(cfg.farthest, len(cloud) - 1)
                batch = build_triplets(cloud, t, k, m, rng)
                nm.zero_grad(plist)
                loss = triplet_step_loss(params, batch, cloud, cfg)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite triplet loss at step {step}", step=step)
                nm.backward(loss)
                nm.sgd_step(plist, cfg.lr)
                losses.append(float(loss.data))
                if writer:
                    writer.writerow((step, epoch, int(i), losses[-1]))
                step += 1
            epoch_losses.append(float(np.mean(losses)))
            log.info("pretrain epoch %d mean triplet loss %.6f", epoch, epoch_losses[-1])
    finally:
        if handle:
            handle.close()
    return epoch_losses


def triplet_accuracy(params, clouds, transforms, k=64, m=16, seed=0):
    """Fraction of triplets with anchor-positive feature distance below anchor-negative."""
    hits = total = 0
    rng = np.random.default_rng(seed)
    with nm.no_grad():
        for cloud, t in zip(clouds, transforms):
            batch = build_triplets(cloud, t, min(k, len(cloud)), min(m, len(cloud) - 1), rng)
            r1 = extract_features(cloud, params).data
            r2 = extract_features(batch.target, params).data
            a = r1[batch.anchors]
            dp = np.sum((a - r2[batch.positives]) ** 2, axis=1)
            dn = np.sum((a - r2[batch.negatives]) ** 2, axis=1)
            hits += int(np.sum(dp < dn))
            total += len(a)
    return hits / total
