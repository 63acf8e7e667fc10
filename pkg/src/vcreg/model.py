"""The end-to-end registration network: features, attention, virtual points, SVD."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numeric as nm
from .attention import AttentionConfig, attention_forward, init_attention
from .correspondence import (candidate_matrix, default_j, default_k, score_matrix, soft_pointer,
                             solve_svd, top_k_keypoints)
from .errors import CheckpointError
from .features import FeatureConfig, extract_features, init_feature_net
from .geometry import RigidTransform, apply, as_cloud, compose

CHECKPOINT_KIND = "vcreg-registration"


@dataclass(frozen=True)
class ModelConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    k_keypoints: int | None = None      # None: 896 or 0.875 N
    j_candidates: int | None = None     # None: min(32, N2)
    prune_threshold: float | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["features"] = FeatureConfig.from_dict(d["features"])
        d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d)

    @classmethod
    def small(cls, **overrides):
        """Narrow widths for desk-scale training and tests (the toy recipe's network)."""
        feats = FeatureConfig(point_widths=(32, 32), cartesian_width=64, feature_width=64,
                              out_dim=128, k_cartesian=16, k_feature=16)
        base = dict(features=feats, attention=AttentionConfig(embed_dim=256, out_scale=0.35))
        base.update(overrides)
        return cls(**base)


@dataclass
class ForwardResult:
    transform: RigidTransform
    correspondences: object
    mask1: np.ndarray
    mask2: np.ndarray
    scores: np.ndarray


class RegistrationNet:
    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        self.features = init_feature_net(self.config.features, rng)
        self.attention = init_attention(self.config.features.out_dim, self.config.attention, rng)

    def named_parameters(self):
        out = self.features.named_parameters("features.")
        out.update(self.attention.named_parameters("attention."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        nm.assign_parameters(self.named_parameters(), state)

    def forward(self, p1, p2):
        """One registration pass estimating the transform that maps ``p1`` onto ``p2``.

        Runs with gradient recording unless called inside ``numeric.no_grad()``.
        """
        p1, p2 = as_cloud(p1), as_cloud(p2)
        r1 = extract_features(p1, self.features)
        r2 = extract_features(p2, self.features)
        att = attention_forward(r1, r2, self.attention, self.config.prune_threshold)
        q2 = p2[att.keep2]
        scores = score_matrix(att.embedded1, att.embedded2, self.attention.cross)
        k = min(self.config.k_keypoints or default_k(len(att.keep1)), len(att.keep1))
        j = min(self.config.j_candidates or default_j(len(q2)), len(q2))
        kk = top_k_keypoints(scores, k)
        cs = soft_pointer(att.phi1, att.phi2, q2, kk, candidate_matrix(scores, kk, j))
        cs.keypoints = att.keep1[cs.keypoints]
        cs.candidates = att.keep2[cs.candidates]
        transform = solve_svd(p1[cs.keypoints], cs.virtual)
        return ForwardResult(transform, cs, att.mask1, att.mask2, scores)

    def register(self, p1, p2, iterations=1):
        """Estimate the P1 -> P2 transform, re-running on the moved source ``iterations`` times.

        Returns the composed transform and the per-pass results.
        """
        p1 = as_cloud(p1)
        total = RigidTransform.identity()
        passes = []
        with nm.no_grad():
            for _ in range(max(1, int(iterations))):
                res = self.forward(apply(total, p1), p2)
                total = compose(res.transform, total)
                passes.append(res)
        return total, passes

    def save(self, path, **meta):
        meta = dict(meta, kind=CHECKPOINT_KIND, model=self.config.to_dict())
        nm.save_checkpoint(path, self.named_parameters(), meta)

    @classmethod
    def load(cls, path):
        params, meta = nm.load_checkpoint(path)
        if meta.get("kind") != CHECKPOINT_KIND or "model" not in meta:
            raise CheckpointError(f"{path} is not a registration-network checkpoint")
        try:
            config = ModelConfig.from_dict(meta["model"])
        except (TypeError, KeyError) as exc:
            raise CheckpointError(f"unrecognised model configuration in {path}: {exc}") from exc
        net = cls(config)
        net.load_state_dict(params)
        return net

    def load_features(self, path):
        """Load a ``features.`` checkpoint (e.g. from pre-training) into this network."""
        params, _ = nm.load_checkpoint(path)
        own = self.features.named_parameters("features.")
        nm.assign_parameters(own, {k: v for k, v in params.items() if k.startswith("features.")})
