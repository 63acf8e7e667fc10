"""Self-attention outlier masking and cross-cloud non-local attention.

Row convention: features are ``N x c`` matrices and learned maps multiply on
the right, so a "weight matrix applied to Psi" is ``Psi @ V``.

Shapes in the cross-attention step, with E the embedding width::

    query  = Psi_dst @ V_theta                    N_dst x E
    key    = Psi_src @ V_phi                      N_src x E
    attn   = softmax_rows(query @ key.T)          N_dst x N_src
    msg    = attn @ (Psi_src @ V_g)               N_dst x E   (message into dst)
    Phi_dst = msg @ V_c + Psi_dst                 N_dst x E

so ``Phi_1`` receives the message from cloud 2 and ``Phi_2`` the one from cloud 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numeric as nm
from .errors import DimensionError, DomainError
from .geometry import canonical_order


@dataclass
class SelfAttentionParams:
    # consumes (row entropy, row max, row mean) of the self-correlation matrix
    mask_mlp: nm.MlpParams

    def named_parameters(self, prefix="attention.self."):
        return self.mask_mlp.named_parameters(f"{prefix}mask_mlp.")


@dataclass
class CrossAttentionParams:
    v_theta: nm.Tensor
    v_phi: nm.Tensor
    v_g: nm.Tensor
    v_c: nm.Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.v_theta, self.v_phi, self.v_g, self.v_c)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2 or len(set(next(iter(shapes)))) != 1:
            raise DimensionError(f"cross-attention matrices must share one square shape, got {shapes}")

    @property
    def dim(self):
        return self.v_theta.shape[0]

    def named_parameters(self, prefix="attention.cross."):
        return {f"{prefix}{n}": getattr(self, n) for n in ("v_theta", "v_phi", "v_g", "v_c")}


def init_self_attention(rng, hidden=16):
    return SelfAttentionParams(nm.init_mlp((3, hidden, 1), rng, final_activation="none"))


def init_cross_attention(dim, rng, qk_scale=None, noise=0.02, residual_scale=0.1):
    """Query/key maps start near a scaled identity so attention begins as feature
    similarity; value and output maps start small so the residual dominates."""
    if qk_scale is None:
        qk_scale = dim ** -0.25
    eye = np.eye(dim) * qk_scale
    return CrossAttentionParams(
        v_theta=nm.Tensor(eye + rng.normal(0, noise / np.sqrt(dim), (dim, dim)), requires_grad=True),
        v_phi=nm.Tensor(eye + rng.normal(0, noise / np.sqrt(dim), (dim, dim)), requires_grad=True),
        v_g=nm.parameter((dim, dim), rng),
        v_c=nm.parameter((dim, dim), rng, residual_scale / np.sqrt(dim)),
    )


def self_attention(r, params):
    """Return ``(psi, mask)``.

    ``W_c = softmax_rows(R R^T)``, ``F = W_c R``, the mask is a softmax over
    points of the mask MLP applied to row statistics of ``W_c``, and
    ``psi = mask * F`` (row scaling). The mask sums to one over the cloud.
    """
    r = nm.as_tensor(r)
    if r.ndim != 2 or r.shape[0] == 0:
        raise DomainError(f"self-attention needs a non-empty N x c matrix, got {r.shape}")
    n = r.shape[0]
    logits = r @ r.T
    wc = nm.softmax_rows(logits)
    f = wc @ r
    entropy = nm.logsumexp(logits, axis=1) - nm.tsum(wc * logits, axis=1)
    stats = nm.concat([nm.reshape(entropy, (n, 1)),
                       nm.reshape(nm.tmax(wc, axis=1), (n, 1)),
                       nm.mean(wc, axis=1, keepdims=True)], axis=1)
    mask = nm.softmax(nm.mlp_forward(stats, params.mask_mlp), axis=0)
    return mask * f, nm.reshape(mask, (n,))


def non_local(src, dst, params):
    """Message into ``dst`` gathered from ``src`` (rows of the result index ``dst``)."""
    query = dst @ params.v_theta
    key = src @ params.v_phi
    return nm.softmax_rows(query @ key.T) @ (src @ params.v_g)


def cross_attention(psi1, psi2, params):
    """Return ``(phi1, phi2)`` with ``phi_i = message_into_i @ V_c + psi_i``."""
    psi1, psi2 = nm.as_tensor(psi1), nm.as_tensor(psi2)
    if psi1.ndim != 2 or psi2.ndim != 2 or psi1.shape[1] != psi2.shape[1] or psi1.shape[1] != params.dim:
        raise DimensionError(f"cross-attention inputs {psi1.shape}, {psi2.shape} vs dim {params.dim}")
    phi1 = non_local(psi2, psi1, params) @ params.v_c + psi1
    phi2 = non_local(psi1, psi2, params) @ params.v_c + psi2
    return phi1, phi2


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int = 1024
    mask_hidden: int = 16
    out_scale: float = 0.25

    def to_dict(self):
        return asdict(self)


@dataclass
class AttentionParams:
    """Self attention, projection into the embedding, cross attention,
    layer norm and projection back to the feature width."""

    config: AttentionConfig
    self_attn: SelfAttentionParams
    embed_w: nm.Tensor
    embed_b: nm.Tensor
    cross: CrossAttentionParams
    norm_gain: nm.Tensor
    norm_shift: nm.Tensor
    out_w: nm.Tensor

    def named_parameters(self, prefix="attention."):
        out = self.self_attn.named_parameters(f"{prefix}self.")
        out.update(self.cross.named_parameters(f"{prefix}cross."))
        for name in ("embed_w", "embed_b", "norm_gain", "norm_shift", "out_w"):
            out[f"{prefix}{name}"] = getattr(self, name)
        return out


def init_attention(feature_dim, config=AttentionConfig(), rng=None):
    rng = np.random.default_rng(1) if rng is None else rng
    e = config.embed_dim
    return AttentionParams(
        config=config,
        self_attn=init_self_attention(rng, config.mask_hidden),
        embed_w=nm.parameter((feature_dim, e), rng),
        embed_b=nm.constant(0.0, (e,)),
        cross=init_cross_attention(e, rng),
        norm_gain=nm.constant(1.0, (e,)),
        norm_shift=nm.constant(0.0, (e,)),
        out_w=nm.parameter((e, feature_dim), rng, config.out_scale / np.sqrt(e)),
    )


@dataclass
class AttentionOutput:
    embedded1: nm.Tensor     # layer-normed cross-attention output, N1 x E
    embedded2: nm.Tensor
    phi1: nm.Tensor          # projected back to the feature width, N1 x c
    phi2: nm.Tensor
    mask1: np.ndarray
    mask2: np.ndarray
    keep1: np.ndarray        # rows of the inputs that survived pruning
    keep2: np.ndarray


def _prune(psi, mask, threshold):
    n = psi.shape[0]
    if threshold is None:
        return psi, np.arange(n)
    keep = np.flatnonzero(mask.data * n >= threshold)
    if keep.size < min(n, 3):
        keep = np.sort(np.argsort(-mask.data, kind="stable")[: min(n, 3)])
    return nm.take(psi, keep), keep


def attention_forward(r1, r2, params, prune_threshold=None):
    """Run both clouds through self attention and the shared cross attention.

    The self-attention output is rescaled by N so the mask averages to one
    before projection; the mask itself still sums to one. With
    ``prune_threshold`` set, points whose mask is below ``threshold / N``
    are dropped before cross attention. Rows are processed in
    :func:`canonical_order` and returned in input order (``keep`` ascending),
    which makes the outputs exactly permutation equivariant.
    """
    r1, r2 = nm.as_tensor(r1), nm.as_tensor(r2)
    order1, order2 = canonical_order(r1.data), canonical_order(r2.data)
    psi1, mask1 = self_attention(nm.take(r1, order1), params.self_attn)
    psi2, mask2 = self_attention(nm.take(r2, order2), params.self_attn)
    n1, n2 = float(psi1.shape[0]), float(psi2.shape[0])
    psi1, kept1 = _prune(psi1, mask1, prune_threshold)
    psi2, kept2 = _prune(psi2, mask2, prune_threshold)
    e1 = (psi1 * n1) @ params.embed_w + params.embed_b
    e2 = (psi2 * n2) @ params.embed_w + params.embed_b
    phi1, phi2 = cross_attention(e1, e2, params.cross)
    z1 = nm.layer_norm(phi1, params.norm_gain, params.norm_shift)
    z2 = nm.layer_norm(phi2, params.norm_gain, params.norm_shift)
    # back to input order
    keep1, keep2 = order1[kept1], order2[kept2]
    s1, s2 = np.argsort(keep1), np.argsort(keep2)
    z1, z2 = nm.take(z1, s1), nm.take(z2, s2)
    m1, m2 = np.empty_like(mask1.data), np.empty_like(mask2.data)
    m1[order1], m2[order2] = mask1.data, mask2.data
    return AttentionOutput(z1, z2, z1 @ params.out_w, z2 @ params.out_w, m1, m2, keep1[s1], keep2[s2])
