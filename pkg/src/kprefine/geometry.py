"""Two-view geometry: calibration, essential matrices, epipolar errors and pose metrics.

Everything here runs in float64. Point arguments accept a single point or a
stack of points along the leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import AmbiguousCheiralityError, DegenerateGeometryError, InvalidInputError

FAILED_POSE_ERROR = 180.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite intrinsics {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RelativePose:
    """Rotation and unit translation mapping camera-1 coordinates into camera 2."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("non-finite pose")
        norm = np.linalg.norm(t)
        if norm == 0:
            raise InvalidInputError("translation must be nonzero")
        R.setflags(write=False)
        t = t / norm
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = skew(axis)
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def normalize_point(k: CameraIntrinsics, p) -> np.ndarray:
    """Map pixel coordinates ``(..., 2)`` to homogeneous calibrated coordinates ``(..., 3)``."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 2:
        raise InvalidInputError(f"expected trailing dimension 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("non-finite pixel coordinates")
    out = np.empty(p.shape[:-1] + (3,))
    out[..., 0] = (p[..., 0] - k.cx) / k.fx
    out[..., 1] = (p[..., 1] - k.cy) / k.fy
    out[..., 2] = 1.0
    return out


def essential_from_pose(pose: RelativePose) -> np.ndarray:
    return skew(pose.translation) @ pose.rotation


def project_to_essential(m) -> np.ndarray:
    """Closest matrix with singular values ``(s, s, 0)``, s the mean of the top two."""
    U, s, Vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    sm = 0.5 * (s[0] + s[1])
    return U @ np.diag([sm, sm, 0.0]) @ Vt


def _epipolar_terms(n1, n2, e):
    n1 = np.asarray(n1, dtype=np.float64)
    n2 = np.asarray(n2, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    a = np.einsum("...ij,...j->...i", e, n1)  # E n1
    b = np.einsum("...ji,...j->...i", e, n2)  # E^T n2
    r = np.sum(n2 * a, axis=-1)
    den = a[..., 0] ** 2 + a[..., 1] ** 2 + b[..., 0] ** 2 + b[..., 1] ** 2
    return r, den, a, b


def epipolar_error(n1, n2, e) -> np.ndarray | float:
    """Sampson-type squared epipolar error of homogeneous calibrated points.

    Raises DegenerateGeometryError if any denominator is zero.
    """
    r, den, _, _ = _epipolar_terms(n1, n2, e)
    if np.any(den <= 0):
        raise DegenerateGeometryError("epipolar line gradients vanish for at least one correspondence")
    out = r**2 / den
    return float(out) if np.ndim(out) == 0 else out


def epipolar_error_grad(n1, n2, e):
    """Error and its gradient w.r.t. the x, y components of ``n1`` and ``n2``.

    ``e`` may be a single matrix or one matrix per correspondence.
    Returns ``(err, g1, g2)`` with ``g1``/``g2`` shaped ``(..., 2)``.
    """
    e = np.asarray(e, dtype=np.float64)
    r, den, a, b = _epipolar_terms(n1, n2, e)
    if np.any(den <= 0):
        raise DegenerateGeometryError("epipolar line gradients vanish for at least one correspondence")
    err = r**2 / den
    # d r / d n1 = E^T n2 = b ;  d r / d n2 = E n1 = a
    # d den / d n1 = 2 (a0 E[0,:] + a1 E[1,:]) ; d den / d n2 = 2 (b0 E[:,0] + b1 E[:,1])
    dden1 = 2.0 * (a[..., 0:1] * e[..., 0, :2] + a[..., 1:2] * e[..., 1, :2])
    dden2 = 2.0 * (b[..., 0:1] * e[..., :2, 0] + b[..., 1:2] * e[..., :2, 1])
    c1 = (2.0 * r / den)[..., None]
    c2 = (r**2 / den**2)[..., None]
    g1 = c1 * b[..., :2] - c2 * dden1
    g2 = c1 * a[..., :2] - c2 * dden2
    return err, g1, g2


def epipolar_distance(n1, n2, e):
    return np.sqrt(epipolar_error(n1, n2, e))


def epipolar_loss(n1, n2, e, t_prime: float):
    """Truncated epipolar loss: the error below ``t_prime`` distance, the constant ``t_prime`` otherwise."""
    if not t_prime > 0:
        raise InvalidInputError(f"t_prime must be positive, got {t_prime}")
    err = np.asarray(epipolar_error(n1, n2, e))
    out = np.where(np.sqrt(err) < t_prime, err, t_prime)
    return float(out) if out.ndim == 0 else out


def normalized_threshold(t: float, k1: CameraIntrinsics, k2: CameraIntrinsics) -> float:
    focals = (k1.fx, k1.fy, k2.fx, k2.fy)
    if min(focals) <= 0:
        raise InvalidInputError("focal lengths must be positive")
    return t / (sum(focals) / 4.0)


def mean_focal(k1: CameraIntrinsics, k2: CameraIntrinsics) -> float:
    return (k1.fx + k1.fy + k2.fx + k2.fy) / 4.0


def _decomposition_candidates(e):
    U, _, Vt = np.linalg.svd(e)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def cheirality_depths(R, t, n1, n2):
    """Depths of the linearly triangulated points in both cameras."""
    Rx1 = n1 @ R.T
    c = np.cross(n2, Rx1)
    ct = np.cross(n2, t)
    denom = np.sum(c * c, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam1 = -np.sum(ct * c, axis=-1) / denom
    X = lam1[:, None] * n1
    depth2 = (X @ R.T + t)[:, 2]
    return X[:, 2], depth2


def decompose_essential(e, n1, n2) -> RelativePose:
    """Recover the pose whose decomposition puts most supports in front of both cameras.

    ``n1``/``n2`` are the supporting calibrated points, shape ``(N, 3)``.
    """
    n1 = np.atleast_2d(np.asarray(n1, dtype=np.float64))
    n2 = np.atleast_2d(np.asarray(n2, dtype=np.float64))
    if len(n1) == 0 or n1.shape != n2.shape:
        raise InvalidInputError("need at least one support correspondence with matching shapes")
    e = project_to_essential(e)
    counts = []
    cands = _decomposition_candidates(e)
    for R, t in cands:
        z1, z2 = cheirality_depths(R, t, n1, n2)
        counts.append(int(np.sum((z1 > 0) & (z2 > 0))))
    best = max(counts)
    if best == 0 or counts.count(best) > 1:
        raise AmbiguousCheiralityError(f"no strict cheirality winner, positive-depth counts {counts}")
    R, t = cands[counts.index(best)]
    return RelativePose(R, t)


def rotation_error_deg(r_est, r_gt) -> float:
    c = (np.trace(np.asarray(r_gt).T @ np.asarray(r_est)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error_deg(t_est, t_gt) -> float:
    a = np.asarray(t_est, dtype=np.float64)
    b = np.asarray(t_gt, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))


def pose_error(est: RelativePose, gt: RelativePose) -> float:
    """Max of rotation and translation-direction angular errors, in degrees."""
    return max(
        rotation_error_deg(est.rotation, gt.rotation),
        translation_error_deg(est.translation, gt.translation),
    )


def auc(errors, threshold: float) -> float:
    """Normalized area under the recall curve ``recall(x) = mean(errors < x)`` on ``[0, threshold]``.

    The recall curve is a step function, so the integral is exact:
    each error ``e`` contributes ``max(0, threshold - e)``.
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise InvalidInputError("auc of an empty error list")
    if not threshold > 0:
        raise InvalidInputError("threshold must be positive")
    if np.any(~np.isfinite(errors)) or np.any(errors < 0):
        raise InvalidInputError("errors must be finite and non-negative")
    return float(np.mean(np.clip(threshold - errors, 0.0, threshold)) / threshold)
