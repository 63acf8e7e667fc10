"""Supervised training of the registration network on generated pairs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .data import WHOLE_ROTATION, WHOLE_TRANSLATION, random_transform
from .errors import NonFiniteError, TrainingDiverged
from .geometry import apply, compose, invert
from .losses import LossConfig, combined_loss, correspondence_loss, label_matches, transformation_loss

log = logging.getLogger(__name__)

LOSS_CSV_FIELDS = ("step", "epoch", "pair", "loss_cor", "loss_trans_metric", "combined")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.05
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    # draw a fresh ground truth for every step instead of the pair's stored one
    resample: bool = False
    # learning-rate schedule: linear warm-up over ``warmup`` epochs, then constant or cosine decay
    warmup: int = 0
    decay: str = "constant"
    rotation: tuple = WHOLE_ROTATION
    translation: tuple = WHOLE_TRANSLATION


@dataclass
class TrainHistory:
    epoch_loss_cor: list = field(default_factory=list)
    rows: list = field(default_factory=list)


def learning_rate(cfg, epoch):
    """Step size for ``epoch`` (0-based) under the schedule in ``cfg``."""
    if epoch < cfg.warmup:
        return cfg.lr * (epoch + 1) / (cfg.warmup + 1)
    if cfg.decay == "cosine":
        span = max(1, cfg.epochs - cfg.warmup)
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * (epoch - cfg.warmup) / span))
    return cfg.lr


def train_step(net, source, target, truth, cfg, lr=None):
    """One SGD step on a single pair. Returns ``(loss_cor, loss_trans, combined)``;
    ``combined`` is NaN if the update left a parameter non-finite."""
    params = net.parameters()
    nm.zero_grad(params)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            res = net.forward(source, target)
    except NonFiniteError:
        return (float("nan"),) * 3
    labels = label_matches(res.correspondences, source, truth)
    corr = correspondence_loss(res.correspondences, labels, source, truth, cfg.loss)
    total = combined_loss(corr, params, cfg.loss)
    values = (float(corr.data), transformation_loss(res.transform, truth), float(total.data))
    if not all(math.isfinite(v) for v in values):
        return values
    nm.backward(total)
    nm.sgd_step(params, cfg.lr if lr is None else lr)
    if not all(np.all(np.isfinite(p.data)) for p in params):
        return values[0], values[1], float("nan")
    return values


def train(net, pairs, cfg=TrainConfig(), log_path=None):
    """Train ``net`` in place on ``pairs`` (objects with source/target/truth).

    Pair order is shuffled per epoch from ``cfg.seed``. On a non-finite loss
    the parameters are restored to the last finite state and
    :class:`TrainingDiverged` is raised carrying that state.
    """
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    writer = None
    handle = open(log_path, "w", newline="") if log_path else None
    try:
        if handle:
            writer = csv.writer(handle)
            writer.writerow(LOSS_CSV_FIELDS)
        step = 0
        for epoch in range(cfg.epochs):
            losses = []
            for i in rng.permutation(len(pairs)):
                pair = pairs[i]
                target, truth = pair.target, pair.truth
                if cfg.resample:
                    fresh = random_transform(cfg.rotation, cfg.translation, rng)
                    target, truth = apply(compose(fresh, invert(truth)), target), fresh
                snapshot = net.state_dict()
                values = train_step(net, pair.source, target, truth, cfg, learning_rate(cfg, epoch))
                if not all(math.isfinite(v) for v in values):
                    net.load_state_dict(snapshot)
                    raise TrainingDiverged(f"non-finite loss at step {step}", last_good=snapshot, step=step)
                losses.append(values[0])
                row = (step, epoch, int(i), *values)
                history.rows.append(row)
                if writer:
                    writer.writerow(row)
                step += 1
            history.epoch_loss_cor.append(float(np.mean(losses)) if losses else float("nan"))
            log.info("epoch %d mean loss_cor %.6f", epoch, history.epoch_loss_cor[-1])
    finally:
        if handle:
            handle.close()
    return history
