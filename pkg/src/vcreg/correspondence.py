"""Keypoint/candidate selection, soft-pointer virtual points and the closed-form pose solver."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import ContractError, DegenerateGeometryError, DimensionError, DomainError, NonFiniteError
from .geometry import RigidTransform, as_cloud

DEFAULT_K = 896
DEFAULT_J = 32


def default_k(n1):
    """Keypoint count: 896 for 1024-point clouds, the same 0.875 ratio below that."""
    return min(DEFAULT_K, math.ceil(0.875 * n1))


def default_j(n2):
    return min(DEFAULT_J, n2)


def _values(x):
    return x.data if isinstance(x, nm.Tensor) else np.asarray(x, dtype=np.float64)


def score_matrix(phi1, phi2, params):
    """``(phi1 V_theta)(phi2 V_phi)^T`` as a plain array (selection is not differentiated)."""
    a, b = _values(phi1), _values(phi2)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or a.shape[1] != params.v_theta.shape[0]:
        raise DimensionError(f"score matrix inputs {a.shape}, {b.shape} vs V of shape {params.v_theta.shape}")
    s = (a @ params.v_theta.data) @ (b @ params.v_phi.data).T
    if not np.all(np.isfinite(s)):
        raise NonFiniteError("score matrix has non-finite entries")
    return s


def top_k_keypoints(scores, k):
    """Rows with the ``k`` largest row maxima (ties to the lower row), sorted ascending."""
    s = np.asarray(scores)
    n = s.shape[0]
    if not 1 <= k <= n:
        raise DomainError(f"cannot select {k} keypoints from {n} rows")
    row_max = s.max(axis=1)
    order = np.lexsort((np.arange(n), -row_max))
    return np.sort(order[:k])


def top_j_candidates(scores, g, j):
    """Columns of the ``j`` largest entries of row ``g``, best first, ties to the lower column."""
    row = np.asarray(scores)[g]
    if not 1 <= j <= row.shape[0]:
        raise DomainError(f"cannot select {j} candidates from {row.shape[0]} columns")
    return np.argsort(-row, kind="stable")[:j]


def candidate_matrix(scores, keypoints, j):
    return np.stack([top_j_candidates(scores, g, j) for g in keypoints])


@dataclass
class CorrespondenceSet:
    keypoints: np.ndarray        # K indices into P1
    candidates: np.ndarray       # K x J indices into P2
    weights: np.ndarray          # K x J pointer weights, rows sum to 1
    virtual: np.ndarray          # K x 3 virtual corresponding points
    virtual_tensor: nm.Tensor | None = None

    def __len__(self):
        return len(self.keypoints)

    def to_text(self):
        """One line per keypoint: index | candidate indices | weights | virtual xyz."""
        lines = ["# keypoint | candidates | weights | virtual_x virtual_y virtual_z"]
        for i, g in enumerate(self.keypoints):
            cands = " ".join(str(int(c)) for c in self.candidates[i])
            w = " ".join(repr(float(x)) for x in self.weights[i])
            v = " ".join(repr(float(x)) for x in self.virtual[i])
            lines.append(f"{int(g)} | {cands} | {w} | {v}")
        return "\n".join(lines) + "\n"


def soft_pointer(phi1, phi2, p2, keypoints, candidates):
    """Virtual point of each keypoint: softmax over its candidate columns of
    ``phi1 phi2^T``, then the weighted blend of the candidate coordinates.

    Gradients flow into ``phi1``/``phi2`` through the weights; index
    selection is constant.
    """
    phi1, phi2 = nm.as_tensor(phi1), nm.as_tensor(phi2)
    p2 = as_cloud(p2)
    kk = np.asarray(keypoints, dtype=np.int64)
    jj = np.asarray(candidates, dtype=np.int64)
    if jj.ndim != 2 or jj.shape[0] != kk.shape[0] or jj.shape[1] == 0:
        raise ContractError(f"candidate matrix must be K x J with J >= 1, got {jj.shape}")
    if kk.size and (kk.min() < 0 or kk.max() >= phi1.shape[0]):
        raise ContractError("keypoint index out of range")
    if jj.min() < 0 or jj.max() >= phi2.shape[0] or phi2.shape[0] != p2.shape[0]:
        raise ContractError("candidate index out of range")
    k, j = jj.shape
    scores = nm.take(phi1, kk) @ phi2.T
    weights = nm.softmax_rows(nm.take_along_rows(scores, jj))
    coords = p2[jj]                                           # K x J x 3
    virtual = nm.tsum(nm.reshape(weights, (k, j, 1)) * coords, axis=1)
    return CorrespondenceSet(kk, jj, weights.data.copy(), virtual.data.copy(), virtual)


def solve_svd(keys, virtuals, rank_tol=1e-9):
    """Least-squares rigid transform mapping ``keys`` onto ``virtuals``.

    Centre both sets, form ``H = sum (x - x_mean)(y - y_mean)^T``, take
    ``H = U S V^T`` and return ``R = V diag(1, 1, d) U^T`` with
    ``d = sign det(V U^T)`` and ``t = y_mean - R x_mean``.
    """
    x = np.asarray(keys, dtype=np.float64)
    y = np.asarray(virtuals, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise DimensionError(f"keys {x.shape} and virtuals {y.shape} must both be K x 3")
    if x.shape[0] < 3:
        raise DomainError(f"need at least 3 correspondences, got {x.shape[0]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFiniteError("non-finite correspondence coordinates")
    x_mean, y_mean = x.mean(axis=0), y.mean(axis=0)
    h = (x - x_mean).T @ (y - y_mean)
    u, s, vt = np.linalg.svd(h)
    rank = int(np.sum(s > rank_tol * max(s[0], 1e-300))) if s[0] > 0 else 0
    if rank < 2:
        raise DegenerateGeometryError(f"cross-covariance has rank {rank}; correspondences are collinear or coincident")
    v = vt.T
    d = 1.0 if np.linalg.det(v @ u.T) > 0 else -1.0
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    # re-orthonormalise to absorb rounding before validation
    uu, _, ww = np.linalg.svd(r)
    r = uu @ ww
    return RigidTransform(r, y_mean - r @ x_mean)


def mean_squared_error(t, keys, virtuals):
    """``E(R, t) = mean |R x + t - y|^2``."""
    resid = np.asarray(keys) @ t.rotation.T + t.translation - np.asarray(virtuals)
    return float(np.mean(np.sum(resid ** 2, axis=1)))
