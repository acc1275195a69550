"""Batch refinement of datasets, pose evaluation over image pairs, offset statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError
from .geometry import FAILED_POSE_ERROR, CameraIntrinsics, RelativePose, auc, pose_error
from .ransac import MIN_SAMPLE, RansacConfig, ransac
from .refine import NetworkWeights, PatchBatch, RefineConfig, apply_offsets, forward
from .synthetic import Dataset

AUC_THRESHOLDS = (5.0, 10.0, 20.0)
LENGTH_BIN = 0.25
LENGTH_MAX = 5.0
ANGLE_BIN = 15.0


@dataclass
class RefinedMatches:
    sample_id: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray
    p1_refined: np.ndarray
    p2_refined: np.ndarray
    skipped: np.ndarray

    def __len__(self):
        return len(self.sample_id)


def refine_dataset(weights: NetworkWeights, cfg: RefineConfig, ds: Dataset, chunk: int = 1024) -> RefinedMatches:
    if ds.descriptor_dim != cfg.descriptor_dim:
        raise InvalidInputError(f"dataset D={ds.descriptor_dim} but checkpoint D={cfg.descriptor_dim}")
    weights.check(cfg)
    d1 = np.zeros((len(ds), 2))
    d2 = np.zeros((len(ds), 2))
    for lo in range(0, len(ds), chunk):
        sl = slice(lo, lo + chunk)
        batch = PatchBatch(ds.patch1[sl], ds.patch2[sl], ds.d1[sl], ds.d2[sl], ds.score1[sl], ds.score2[sl])
        _, _, a, b, _ = forward(weights, batch, cfg)
        d1[sl] = a
        d2[sl] = b
    p1, p2, d1, d2 = apply_offsets(ds.quantized1, ds.quantized2, d1, d2, ds.skipped)
    return RefinedMatches(ds.sample_id.copy(), d1, d2, p1, p2, ds.skipped.copy())


def write_refined(path, rm: RefinedMatches) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(rm)):
            rec = {
                "sample_id": int(rm.sample_id[i]),
                "delta1": rm.delta1[i].tolist(),
                "delta2": rm.delta2[i].tolist(),
                "p1_refined": rm.p1_refined[i].tolist(),
                "p2_refined": rm.p2_refined[i].tolist(),
                "skipped": bool(rm.skipped[i]),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_refined(path) -> RefinedMatches:
    with Path(path).open(encoding="utf-8") as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    if not recs:
        raise InvalidInputError(f"no refined matches in {path}")

    def col(k):
        return np.asarray([r[k] for r in recs], dtype=np.float64)

    return RefinedMatches(
        np.asarray([r["sample_id"] for r in recs], dtype=np.int64),
        col("delta1"),
        col("delta2"),
        col("p1_refined"),
        col("p2_refined"),
        np.asarray([r["skipped"] for r in recs], dtype=bool),
    )


def align_refined(ds: Dataset, rm: RefinedMatches):
    """Refined keypoints in dataset row order."""
    pos = {int(s): i for i, s in enumerate(rm.sample_id)}
    try:
        idx = np.array([pos[int(s)] for s in ds.sample_id])
    except KeyError as exc:
        raise InvalidInputError(f"refined matches lack sample {exc}") from exc
    return rm.p1_refined[idx], rm.p2_refined[idx]


@dataclass
class PairResult:
    pair_id: int
    repeat: int
    pose_err_deg: float
    inlier_ratio: float
    n_inliers: int


def evaluate_pairs(ds: Dataset, p1, p2, cfg: RansacConfig = RansacConfig(), repeats: int = 3) -> list:
    """RANSAC pose per image pair and repeat; repeat ``k`` uses seed ``cfg.seed + k``.

    The sampler for a pair is seeded by ``(seed + k, pair_id)`` so results do
    not depend on which other pairs are evaluated.
    """
    if repeats < 1:
        raise InvalidInputError("repeats must be >= 1")
    out = []
    groups = ds.pair_indices()
    for k in range(repeats):
        for pair_id, idx in groups.items():
            if len(idx) < MIN_SAMPLE:
                out.append(PairResult(pair_id, k, FAILED_POSE_ERROR, 0.0, 0))
                continue
            i0 = idx[0]
            k1, k2 = CameraIntrinsics(*ds.k1[i0]), CameraIntrinsics(*ds.k2[i0])
            gt = RelativePose(ds.R[i0], ds.t[i0])
            seed = int(np.random.SeedSequence([cfg.seed + k, int(pair_id)]).generate_state(1)[0])
            run_cfg = replace(cfg, seed=seed)
            res = ransac(p1[idx], p2[idx], k1, k2, run_cfg)
            err = pose_error(res.pose, gt) if res.success else FAILED_POSE_ERROR
            out.append(PairResult(int(pair_id), k, err, res.inlier_ratio, res.n_inliers))
    return out


def summarize(results) -> dict:
    """AUC at 5/10/20 degrees (averaged over repeats), mean/median error, mean inlier ratio."""
    if not results:
        raise InvalidInputError("no pair results")
    repeats = sorted({r.repeat for r in results})
    errs = np.array([r.pose_err_deg for r in results])
    out = {}
    for th in AUC_THRESHOLDS:
        per = [auc([r.pose_err_deg for r in results if r.repeat == k], th) for k in repeats]
        out[f"auc{int(th)}"] = float(np.mean(per))
    out["mean"] = float(np.mean(errs))
    out["median"] = float(np.median(errs))
    out["mean_inlier_ratio"] = float(np.mean([r.inlier_ratio for r in results]))
    return out


def offset_histograms(deltas, skipped=None):
    """Length and orientation histograms of offset vectors ``(N, 2)``.

    Returns ``(length_edges, length_counts, angle_edges, angle_counts)``.
    Lengths use 0.25 px bins over [0, 5] (5 itself lands in the last bin).
    Angles are ``atan2(dy, dx)`` in [0, 360) with 15 degree bins; zero-length
    offsets have no orientation and are left out of that histogram.
    """
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 2)
    if skipped is not None:
        deltas = deltas[~np.asarray(skipped, dtype=bool)]
    if len(deltas) == 0:
        raise InvalidInputError("no offsets to histogram")
    length = np.hypot(deltas[:, 0], deltas[:, 1])
    n_len = int(round(LENGTH_MAX / LENGTH_BIN))
    len_edges = np.arange(n_len + 1) * LENGTH_BIN
    len_idx = np.minimum((length / LENGTH_BIN).astype(np.int64), n_len - 1)
    len_counts = np.bincount(len_idx, minlength=n_len)
    moving = length > 0
    ang = np.degrees(np.arctan2(deltas[moving, 1], deltas[moving, 0])) % 360.0
    n_ang = int(round(360.0 / ANGLE_BIN))
    ang_edges = np.arange(n_ang + 1) * ANGLE_BIN
    ang_idx = np.minimum((ang / ANGLE_BIN).astype(np.int64), n_ang - 1)
    ang_counts = np.bincount(ang_idx, minlength=n_ang)
    return len_edges, len_counts, ang_edges, ang_counts
