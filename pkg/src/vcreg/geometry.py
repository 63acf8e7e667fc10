"""Point clouds, rigid transforms, sampling/neighbourhood primitives and error metrics.

A point cloud is a plain ``(N, 3)`` float64 array; row order is meaningful
because indices serve as correspondence identities.

Euler angles follow the intrinsic Z-Y-X convention: ``(yaw, pitch, roll)``
in degrees with ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``. Everything that
depends on that choice goes through :func:`euler_to_rotation` and
:func:`rotation_to_euler`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

ORTHO_TOL = 1e-9


def as_cloud(points):
    """Validate and return ``points`` as a float64 ``(N, 3)`` array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DomainError(f"point cloud must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise DomainError("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise DomainError("point cloud has non-finite coordinates")
    return pts


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise DomainError(f"bad transform shapes {r.shape}, {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise DomainError("transform has non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            raise DomainError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise DomainError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other):
        return compose(self, other)


def apply(t, points):
    """Map every row ``x`` to ``R x + t``."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ t.rotation.T + t.translation


def compose(second, first):
    """The transform equal to applying ``first`` and then ``second``."""
    return RigidTransform(second.rotation @ first.rotation,
                          second.rotation @ first.translation + second.translation)


def invert(t):
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class EulerAngles:
    """Intrinsic Z-Y-X angles in degrees. ``gimbal_locked`` marks a tie-broken inverse."""

    yaw: float
    pitch: float
    roll: float
    gimbal_locked: bool = False

    def as_array(self):
        return np.array([self.yaw, self.pitch, self.roll])


def euler_to_rotation(e):
    if isinstance(e, EulerAngles):
        e = e.as_array()
    yaw, pitch, roll = np.radians(np.asarray(e, dtype=np.float64))
    if not np.all(np.isfinite([yaw, pitch, roll])):
        raise DomainError("non-finite Euler angle")
    return _rz(yaw) @ _ry(pitch) @ _rx(roll)


def rotation_to_euler(r, lock_tol=1e-9):
    """Inverse of :func:`euler_to_rotation`.

    At gimbal lock (pitch = +-90 degrees) yaw and roll are not separable; roll
    is set to 0, yaw absorbs the remaining rotation and the result is flagged.
    """
    r = np.asarray(r, dtype=np.float64)
    sp = float(np.clip(-r[2, 0], -1.0, 1.0))
    cp = float(np.hypot(r[0, 0], r[1, 0]))
    if cp < lock_tol:
        pitch = 90.0 if sp > 0 else -90.0
        yaw = np.degrees(np.arctan2(-r[0, 1], r[1, 1]))
        return EulerAngles(float(yaw), pitch, 0.0, True)
    pitch = np.degrees(np.arctan2(sp, cp))
    yaw = np.degrees(np.arctan2(r[1, 0], r[0, 0]))
    roll = np.degrees(np.arctan2(r[2, 1], r[2, 2]))
    return EulerAngles(float(yaw), float(pitch), float(roll))


def rotation_angle(r):
    """Geodesic angle of a rotation matrix, in degrees.

    Uses ``|R - I|_F = 2 sqrt(2) sin(theta / 2)``, which stays accurate for
    tiny angles where the arccos-of-trace form loses half its digits.
    """
    chord = np.linalg.norm(np.asarray(r, dtype=np.float64) - np.eye(3))
    return float(np.degrees(2.0 * np.arcsin(min(1.0, chord / (2.0 * np.sqrt(2.0))))))


def canonical_order(rows):
    """Lexicographic row order (first column most significant).

    Evaluating a cloud in this order and scattering the results back makes
    per-point outputs exactly permutation equivariant, since every reduction
    then sums in the same order whatever the input order was.
    """
    rows = np.asarray(rows)
    return np.lexsort(rows.T[::-1])


def pairwise_sq_dists(a, b, budget=4_000_000):
    """Exact squared distances ``|a_i - b_j|^2`` computed by differences, row-chunked."""
    out = np.empty((a.shape[0], b.shape[0]))
    chunk = max(1, budget // max(1, b.shape[0] * a.shape[1]))
    for s in range(0, a.shape[0], chunk):
        d = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", d, d)
    return out


def farthest_point_sampling(points, k, seed=None):
    """Greedy max-min subset of ``k`` indices.

    Starts from index 0 unless ``seed`` is given, in which case the start
    index is drawn from ``numpy.random.default_rng(seed)``. Ties pick the
    lowest index.
    """
    pts = as_cloud(points)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise DomainError(f"cannot sample {k} of {n} points")
    start = 0 if seed is None else int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    d = np.einsum("ij,ij->i", pts - pts[start], pts - pts[start])
    d[start] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        diff = pts - pts[nxt]
        d = np.minimum(d, np.einsum("ij,ij->i", diff, diff))
        d[chosen[: i + 1]] = -1.0
    return chosen


def knn_indices(points, k, query=None):
    """Indices of the ``k`` nearest neighbours of every point, nearest first.

    Without ``query`` the neighbourhood is within ``points`` and each point
    excludes itself; ties go to the lower index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if query is None:
        if not 1 <= k < n:
            raise DomainError(f"k={k} neighbours need more than k points (have {n})")
        d = pairwise_sq_dists(pts, pts)
        np.fill_diagonal(d, np.inf)
    else:
        if not 1 <= k <= n:
            raise DomainError(f"k={k} neighbours out of range for {n} points")
        d = pairwise_sq_dists(np.asarray(query, dtype=np.float64), pts)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def nearest_neighbor(query, points):
    """Index of and squared distance to the nearest row of ``points`` for each query row."""
    d = pairwise_sq_dists(np.asarray(query, dtype=np.float64), np.asarray(points, dtype=np.float64))
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(d.shape[0]), idx]


@dataclass(frozen=True)
class RegistrationMetrics:
    """Batch errors. Rotation in degrees over per-angle Euler residuals, translation
    in metres over per-axis residuals; ``geodesic_mean`` is a diagnostic."""

    rotation_mse: float
    rotation_rmse: float
    rotation_mae: float
    translation_mse: float
    translation_rmse: float
    translation_mae: float
    geodesic_mean: float
    count: int

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _wrap_degrees(a):
    return (a + 180.0) % 360.0 - 180.0


def euler_residuals(estimate, truth):
    e = rotation_to_euler(estimate.rotation).as_array()
    g = rotation_to_euler(truth.rotation).as_array()
    return _wrap_degrees(e - g)


def registration_error(estimates, truths):
    """Aggregate rotation/translation errors of one transform or a batch."""
    if isinstance(estimates, RigidTransform):
        estimates, truths = [estimates], [truths]
    estimates, truths = list(estimates), list(truths)
    if len(estimates) != len(truths) or not estimates:
        raise DomainError("need equally many (and at least one) estimates and truths")
    rot = np.array([euler_residuals(e, g) for e, g in zip(estimates, truths)])
    trans = np.array([e.translation - g.translation for e, g in zip(estimates, truths)])
    geo = [rotation_angle(e.rotation.T @ g.rotation) for e, g in zip(estimates, truths)]
    rmse = float(np.mean(rot ** 2))
    tmse = float(np.mean(trans ** 2))
    return RegistrationMetrics(
        rotation_mse=rmse,
        rotation_rmse=float(np.sqrt(rmse)),
        rotation_mae=float(np.mean(np.abs(rot))),
        translation_mse=tmse,
        translation_rmse=float(np.sqrt(tmse)),
        translation_mae=float(np.mean(np.abs(trans))),
        geodesic_mean=float(np.mean(geo)),
        count=len(estimates),
    )
