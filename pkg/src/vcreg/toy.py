"""Desk-scale end-to-end run: pre-train, train and evaluate on procedural shapes.

The whole run takes well under a minute on one CPU core and is used by the
acceptance suite and as a worked example of the training API.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import easy_config, random_transform, toy_pairs
from .geometry import rotation_angle
from .losses import LossConfig
from .model import ModelConfig, RegistrationNet
from .pretrain import PretrainConfig, pretrain_features, triplet_accuracy
from .train import TrainConfig, train


@dataclass(frozen=True)
class ToyRecipe:
    seed: int = 0
    n_points: int = 128
    train_pairs: int = 8
    eval_pairs: int = 20
    eval_max_angle: float = 20.0
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(epochs=30, lr=0.01))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50, lr=0.05, resample=True,
                                                                   loss=LossConfig(gamma=1.0)))
    model: ModelConfig = field(default_factory=ModelConfig.small)


@dataclass
class ToyReport:
    net: RegistrationNet
    epoch_loss_cor: list
    pretrain_losses: list
    triplet_accuracy_before: float
    triplet_accuracy_after: float
    untrained_error: float          # mean geodesic error (degrees) of the initial network
    trained_error: float            # same, after pre-training and training
    trained_error_iter: dict        # iterations -> mean geodesic error
    seconds: float

    @property
    def loss_reduction(self):
        return 1.0 - self.epoch_loss_cor[-1] / self.epoch_loss_cor[0]


def mean_rotation_error(net, pairs, iterations=1):
    errs = [rotation_angle(net.register(p.source, p.target, iterations)[0].rotation.T @ p.truth.rotation)
            for p in pairs]
    return float(np.mean(errs))


def eval_set(recipe=ToyRecipe()):
    """Held-out easy pairs; seeds disjoint from the training pairs."""
    return toy_pairs(recipe.eval_pairs, recipe.n_points, seed=recipe.seed + 2,
                     config=easy_config(recipe.n_points, recipe.eval_max_angle))


def run_toy(recipe=ToyRecipe(), iterations=(1, 4)):
    start = time.perf_counter()
    pairs = toy_pairs(recipe.train_pairs, recipe.n_points, seed=recipe.seed + 1)
    held = eval_set(recipe)
    net = RegistrationNet(recipe.model, seed=recipe.seed)
    untrained = mean_rotation_error(net, held)

    held_clouds = [p.source for p in held]
    held_ts = [random_transform(seed=[recipe.seed, 100 + i]) for i in range(len(held))]
    acc_before = triplet_accuracy(net.features, held_clouds, held_ts)
    pre_cfg = PretrainConfig(**{**recipe.pretrain.__dict__, "seed": recipe.seed})
    pre_losses = pretrain_features(net.features, [p.source for p in pairs], pre_cfg)
    acc_after = triplet_accuracy(net.features, held_clouds, held_ts)

    train_cfg = TrainConfig(**{**recipe.train.__dict__, "seed": recipe.seed})
    history = train(net, pairs, train_cfg)
    errors = {k: mean_rotation_error(net, held, k) for k in iterations}
    return ToyReport(net, history.epoch_loss_cor, pre_losses, acc_before, acc_after, untrained,
                     errors[iterations[0]], errors, time.perf_counter() - start)
