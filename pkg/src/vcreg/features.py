"""Per-point feature extraction with graph aggregation in coordinate and feature space.

Pipeline for a cloud of N points::

    xyz (centred) --point MLP--> f0 (N x 64)
    f0 --max over coordinate-kNN edges, MLP--> f1 (N x 128)
    f1 --max over f1-space-kNN edges, MLP--> f2 (N x 256)
    [f0 | f1 | f2] --final MLP--> R (N x 512)

The concatenation of every stage output before the last MLP is the dense
(feature re-use) connection. Widths are configurable through
:class:`FeatureConfig`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numeric as nm
from .errors import DomainError
from .geometry import as_cloud, canonical_order, knn_indices


@dataclass(frozen=True)
class FeatureConfig:
    point_widths: tuple = (64, 64)
    cartesian_width: int = 128
    feature_width: int = 256
    out_dim: int = 512
    k_cartesian: int = 20
    k_feature: int = 20
    center: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["point_widths"] = tuple(d["point_widths"])
        return cls(**d)


@dataclass
class FeatureNetParams:
    config: FeatureConfig
    point_mlp: nm.MlpParams
    cartesian_mlp: nm.MlpParams
    feature_mlp: nm.MlpParams
    final_mlp: nm.MlpParams

    def named_parameters(self, prefix="features."):
        out = {}
        for name in ("point_mlp", "cartesian_mlp", "feature_mlp", "final_mlp"):
            out.update(getattr(self, name).named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())


def init_feature_net(config=FeatureConfig(), rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    c = config
    point = nm.init_mlp((3, *c.point_widths), rng, norm="layer_norm")
    p_out = c.point_widths[-1]
    cart = nm.init_mlp((2 * p_out, c.cartesian_width), rng, norm="layer_norm")
    feat = nm.init_mlp((2 * c.cartesian_width, c.feature_width), rng, norm="layer_norm")
    dense = p_out + c.cartesian_width + c.feature_width
    final = nm.init_mlp((dense, c.out_dim), rng, final_activation="none", final_norm="layer_norm")
    return FeatureNetParams(c, point, cart, feat, final)


def graph_aggregate(features, neighbors, mlp):
    """Neighbourhood aggregation: ``mlp(max_j [f_j - f_i, f_i])`` over the neighbours j of each i.

    The edge features are reduced by an element-wise max over the k
    neighbours and the shared MLP is applied once per point.

    ``features`` is ``N x d``, ``neighbors`` an ``N x k`` index matrix.
    """
    f = nm.as_tensor(features)
    nbr = np.asarray(neighbors)
    n, d = f.shape
    if nbr.ndim != 2 or nbr.shape[0] != n:
        raise DomainError(f"neighbour matrix must be {n} x k, got {nbr.shape}")
    k = nbr.shape[1]
    gathered = nm.take(f, nbr)                       # N x k x d
    centre = nm.reshape(f, (n, 1, d))
    edges = nm.concat([gathered - centre, centre * np.ones((1, k, 1))], axis=-1)
    return nm.mlp_forward(nm.tmax(edges, axis=1), mlp)


def extract_features(points, params):
    """Return the ``N x out_dim`` feature matrix (a differentiable Tensor).

    Row i is the feature of point i. Internally the cloud is processed in
    :func:`canonical_order`, so permuting the input permutes the output rows
    bit for bit.
    """
    pts = as_cloud(points)
    c = params.config
    if pts.shape[0] <= max(c.k_cartesian, c.k_feature):
        raise DomainError(f"need more than {max(c.k_cartesian, c.k_feature)} points, got {pts.shape[0]}")
    order = canonical_order(pts)
    pts = pts[order]
    x = pts - pts.mean(axis=0) if c.center else pts
    f0 = nm.mlp_forward(nm.Tensor(x), params.point_mlp)
    f1 = graph_aggregate(f0, knn_indices(pts, c.k_cartesian), params.cartesian_mlp)
    f2 = graph_aggregate(f1, knn_indices(f1.data, c.k_feature), params.feature_mlp)
    out = nm.mlp_forward(nm.concat([f0, f1, f2], axis=1), params.final_mlp)
    return nm.take(out, np.argsort(order))
