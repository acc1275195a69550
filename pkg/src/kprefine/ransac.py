"""Essential-matrix estimation: eight-point solver and MSAC-scored RANSAC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import AmbiguousCheiralityError, DegenerateGeometryError, EstimationError, InvalidInputError
from .geometry import (
    CameraIntrinsics,
    RelativePose,
    decompose_essential,
    epipolar_error,
    normalize_point,
    normalized_threshold,
)

MIN_SAMPLE = 8
MSAC_MARGIN = 1.5
REFIT_ROUNDS = 10
LO_SAMPLE = 14


@dataclass(frozen=True)
class RansacConfig:
    threshold_px: float = 1.0
    msac_margin_factor: float = MSAC_MARGIN
    iterations: int = 1000
    seed: int = 0
    min_sample: int = MIN_SAMPLE
    lo_iterations: int = 20  # 0 disables local optimization

    def __post_init__(self):
        if not self.threshold_px > 0:
            raise InvalidInputError("threshold_px must be positive")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if self.lo_iterations < 0:
            raise InvalidInputError("lo_iterations must be >= 0")
        if self.min_sample != MIN_SAMPLE:
            raise InvalidInputError("the eight-point solver needs exactly 8 samples")


@dataclass
class EstimationResult:
    e: np.ndarray | None
    inlier_mask: np.ndarray
    pose: RelativePose | None
    best_iteration: int = -1
    hypothesis: np.ndarray | None = None

    @property
    def inlier_ratio(self) -> float:
        return float(np.mean(self.inlier_mask)) if self.inlier_mask.size else 0.0

    @property
    def n_inliers(self) -> int:
        return int(np.sum(self.inlier_mask))

    @property
    def success(self) -> bool:
        return self.pose is not None


def _hartley(n):
    # n: (..., N, 3) calibrated homogeneous points
    xy = n[..., :2]
    mean = xy.mean(axis=-2, keepdims=True)
    dist = np.sqrt(np.sum((xy - mean) ** 2, axis=-1)).mean(axis=-1)
    # coincident points: keep the transform finite, the caller flags the sample
    scale = np.where(dist > 1e-12, np.sqrt(2.0) / np.where(dist > 1e-12, dist, 1.0), 1.0)
    T = np.zeros(n.shape[:-2] + (3, 3))
    T[..., 0, 0] = scale
    T[..., 1, 1] = scale
    T[..., 0, 2] = -scale * mean[..., 0, 0]
    T[..., 1, 2] = -scale * mean[..., 0, 1]
    T[..., 2, 2] = 1.0
    return T, dist


def _project_batch(m):
    U, s, Vt = np.linalg.svd(m)
    sm = 0.5 * (s[..., 0] + s[..., 1])
    d = np.zeros(m.shape[:-2] + (3,))
    d[..., 0] = sm
    d[..., 1] = sm
    return (U * d[..., None, :]) @ Vt


def eight_point_batch(n1, n2):
    """Vectorized eight-point over leading batch axes.

    ``n1``/``n2`` are ``(..., N, 3)`` with N >= 8. Returns ``(E, ok)`` where
    ``E`` is ``(..., 3, 3)`` with unit Frobenius norm and ``ok`` flags
    non-degenerate constraint systems.
    """
    T1, dist1 = _hartley(n1)
    T2, dist2 = _hartley(n2)
    h1 = n1 @ np.swapaxes(T1, -1, -2)
    h2 = n2 @ np.swapaxes(T2, -1, -2)
    A = (h2[..., :, :, None] * h1[..., :, None, :]).reshape(n1.shape[:-1] + (9,))
    finite = np.all(np.isfinite(A), axis=(-2, -1))
    A = np.where(finite[..., None, None], A, 0.0)  # LAPACK may not return on NaN input
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    f = Vt[..., -1, :].reshape(n1.shape[:-2] + (3, 3))
    e = np.swapaxes(T2, -1, -2) @ f @ T1
    e = _project_batch(e)
    e = e / np.linalg.norm(e, axis=(-2, -1), keepdims=True)
    # null space must be one-dimensional: the 8th singular value bounded away from zero
    ok = finite & (s[..., 7] > 1e-10 * s[..., 0]) & (dist1 > 1e-12) & (dist2 > 1e-12)
    ok &= np.all(np.isfinite(e), axis=(-2, -1))
    return e, ok


def eight_point(n1, n2) -> np.ndarray:
    """Least-squares essential matrix from >= 8 calibrated correspondences ``(N, 3)``."""
    n1 = np.asarray(n1, dtype=np.float64)
    n2 = np.asarray(n2, dtype=np.float64)
    if n1.ndim != 2 or n1.shape != n2.shape or n1.shape[1] != 3 or len(n1) < MIN_SAMPLE:
        raise InvalidInputError(f"need matching (N>=8, 3) arrays, got {n1.shape} and {n2.shape}")
    e, ok = eight_point_batch(n1, n2)
    if not ok:
        raise EstimationError("degenerate configuration: constraint matrix is rank deficient")
    return e


def sampson_errors(e, n1, n2):
    """Epipolar errors of ``(N, 3)`` points under one or a stack ``(H, 3, 3)`` of models."""
    e = np.asarray(e)
    if e.ndim == 2:
        return np.asarray(epipolar_error(n1, n2, e))
    a = np.einsum("hij,nj->hni", e, n1)
    b = np.einsum("hji,nj->hni", e, n2)
    r = np.einsum("nj,hnj->hn", n2, a)
    den = a[..., 0] ** 2 + a[..., 1] ** 2 + b[..., 0] ** 2 + b[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        err = r**2 / den
    return np.where(den > 0, err, np.inf)


def msac_score(e, n1, n2, t_norm: float, margin: float = MSAC_MARGIN):
    """Truncated squared-error score (lower is better) and inlier mask.

    Each correspondence contributes ``min(error, (margin * t_norm)**2)``;
    inliers have distance strictly below ``margin * t_norm``.
    """
    if not t_norm > 0:
        raise InvalidInputError("t_norm must be positive")
    cap = (margin * t_norm) ** 2
    err = sampson_errors(e, n1, n2)
    mask = err < cap
    return np.sum(np.minimum(err, cap), axis=-1), mask


def ransac(p1, p2, k1: CameraIntrinsics, k2: CameraIntrinsics, cfg: RansacConfig = RansacConfig()) -> EstimationResult:
    """Uniform-sampling RANSAC over eight-point hypotheses with MSAC scoring.

    The best hypothesis goes through local optimization (iterated
    :func:`eight_point` refits on its inliers, also seeded from random
    non-minimal inlier subsets), and the final model is decomposed with
    cheirality on its inliers. Sampling and local optimization draw from one
    generator seeded by ``cfg.seed``. Failure is a result with ``pose is None``
    rather than an exception.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    n = len(p1)
    if n < MIN_SAMPLE or p2.shape != p1.shape:
        raise InvalidInputError(f"need at least {MIN_SAMPLE} matching correspondences")
    n1 = normalize_point(k1, p1)
    n2 = normalize_point(k2, p2)
    t_norm = normalized_threshold(cfg.threshold_px, k1, k2)
    failed = EstimationResult(None, np.zeros(n, dtype=bool), None)

    rng = np.random.default_rng(cfg.seed)
    samples = np.argsort(rng.random((cfg.iterations, n)), axis=1)[:, :MIN_SAMPLE]
    hyps, ok = eight_point_batch(n1[samples], n2[samples])
    scores, _ = msac_score(hyps, n1, n2, t_norm, cfg.msac_margin_factor)
    scores = np.where(ok, scores, np.inf)
    if not np.any(np.isfinite(scores)):
        return failed
    best = int(np.argmin(scores))  # first index wins ties
    e, final_mask = _local_optimization(hyps[best], n1, n2, t_norm, cfg, rng)
    if e is None or final_mask.sum() < MIN_SAMPLE:
        return failed
    try:
        pose = decompose_essential(e, n1[final_mask], n2[final_mask])
    except (AmbiguousCheiralityError, DegenerateGeometryError):
        return failed
    return EstimationResult(e, final_mask, pose, best, hyps[best])


def _refit(e0, n1, n2, t_norm, margin, max_rounds: int = REFIT_ROUNDS):
    """Eight-point refits on the current inlier set until the mask stops changing.

    Every refit after the first must not raise the MSAC score. Returns
    ``(e, mask, score)``; ``e`` is None when no refit was possible.
    """
    score, mask = msac_score(e0, n1, n2, t_norm, margin)
    e = None
    for _ in range(max_rounds):
        if mask.sum() < MIN_SAMPLE:
            break
        try:
            cand = eight_point(n1[mask], n2[mask])
        except EstimationError:
            break
        cand_score, cand_mask = msac_score(cand, n1, n2, t_norm, margin)
        if e is not None and cand_score > score:
            break
        changed = e is None or not np.array_equal(cand_mask, mask)
        e, score, mask = cand, cand_score, cand_mask
        if not changed:
            break
    return e, mask, score


def _local_optimization(e0, n1, n2, t_norm, cfg: RansacConfig, rng):
    """Refit the best hypothesis, then try refits seeded from random subsets of its inliers.

    Minimal eight-point models are noisy, so the inlier set of even the best
    sample can miss many true inliers. Non-minimal subsets drawn from that set
    followed by iterated least-squares refits recover them; the candidate with
    the lowest MSAC score wins. Returns ``(e, mask)``.
    """
    margin = cfg.msac_margin_factor
    e, mask, score = _refit(e0, n1, n2, t_norm, margin)
    if e is None:
        return None, mask
    for _ in range(cfg.lo_iterations):
        idx = np.flatnonzero(mask)
        if len(idx) <= LO_SAMPLE:
            break
        sub = rng.choice(idx, LO_SAMPLE, replace=False)
        try:
            seed_model = eight_point(n1[sub], n2[sub])
        except EstimationError:
            continue
        cand, cand_mask, cand_score = _refit(seed_model, n1, n2, t_norm, margin)
        if cand is not None and cand_score < score:
            e, mask, score = cand, cand_mask, cand_score
    return e, mask
