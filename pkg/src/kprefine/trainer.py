"""Training loop for the refinement network under the truncated epipolar loss."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .exceptions import ConfigurationError, InvalidInputError, NumericalError
from .geometry import epipolar_error_grad
from .nn import AdamState, adam_step
from .refine import NetworkWeights, PatchBatch, RefineConfig, Variant, backward, forward
from .synthetic import Dataset, epipolar_px

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "loss", "inlier_frac", "mean_epi_px_refined", "mean_epi_px_unrefined")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    t_px: float = 1.5
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if not self.t_px > 0:
            raise ConfigurationError("t_px must be positive")
        if self.lr < 0:
            raise ConfigurationError("lr must be non-negative")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigurationError("checkpoint_every and log_every must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class BatchResult:
    loss: float
    grads: list
    n_inliers: int
    n_used: int
    n_excluded: int
    epi_px_refined: np.ndarray = field(repr=False)
    epi_px_unrefined: np.ndarray = field(repr=False)
    delta1: np.ndarray = field(repr=False)
    delta2: np.ndarray = field(repr=False)


def patch_batch(ds: Dataset) -> PatchBatch:
    return PatchBatch(ds.patch1, ds.patch2, ds.d1, ds.d2, ds.score1, ds.score2)


def _normalize_rows(p, k):
    n = np.empty(p.shape[:-1] + (3,))
    n[:, 0] = (p[:, 0] - k[:, 2]) / k[:, 0]
    n[:, 1] = (p[:, 1] - k[:, 3]) / k[:, 1]
    n[:, 2] = 1.0
    return n


@dataclass
class OffsetLoss:
    loss: float
    grad1: np.ndarray
    grad2: np.ndarray
    inlier: np.ndarray
    valid: np.ndarray
    p1: np.ndarray
    p2: np.ndarray


def offset_loss(batch: Dataset, d1, d2, t_px: float = 1.5) -> OffsetLoss:
    """Mean truncated epipolar loss of ``quantized + d`` and its gradient w.r.t. the offsets.

    Keypoints are normalized with each row's intrinsics; the threshold is
    ``t_px`` over the row's mean focal length. Rows whose epipolar
    denominator vanishes are left out of the mean. Border-skipped rows keep
    their quantized keypoints whatever ``d`` says and carry no gradient.
    """
    n = len(batch)
    moved = ~batch.skipped[:, None]
    p1 = batch.quantized1 + np.where(moved, d1, 0.0)
    p2 = batch.quantized2 + np.where(moved, d2, 0.0)
    n1 = _normalize_rows(p1, batch.k1)
    n2 = _normalize_rows(p2, batch.k2)

    a = np.einsum("nij,nj->ni", batch.E, n1)
    b = np.einsum("nji,nj->ni", batch.E, n2)
    den = a[:, 0] ** 2 + a[:, 1] ** 2 + b[:, 0] ** 2 + b[:, 1] ** 2
    valid = den > 0
    n_used = int(valid.sum())
    focal = (batch.k1[:, 0] + batch.k1[:, 1] + batch.k2[:, 0] + batch.k2[:, 1]) / 4.0
    t_norm = t_px / focal

    g_d1 = np.zeros((n, 2))
    g_d2 = np.zeros((n, 2))
    loss = 0.0
    inlier = np.zeros(n, dtype=bool)
    if n_used:
        err, g1, g2 = epipolar_error_grad(n1[valid], n2[valid], batch.E[valid])
        tv = t_norm[valid]
        inl = np.sqrt(err) < tv
        inlier[valid] = inl
        loss = float(np.sum(np.where(inl, err, tv)) / n_used)
        w = (inl & ~batch.skipped[valid])[:, None] / n_used
        g_d1[valid] = w * g1 / batch.k1[valid][:, :2]
        g_d2[valid] = w * g2 / batch.k2[valid][:, :2]
    return OffsetLoss(loss, g_d1, g_d2, inlier, valid, p1, p2)


def batch_loss(weights: NetworkWeights, batch: Dataset, refine_cfg: RefineConfig, t_px: float = 1.5) -> BatchResult:
    """Mean truncated epipolar loss of the refined keypoints and its weight gradients.

    Matches whose epipolar denominator vanishes are excluded from the mean
    and counted. Border-skipped matches enter the mean with zero
    displacement and carry no gradient.
    """
    n = len(batch)
    if n == 0:
        raise InvalidInputError("empty batch")
    _, _, d1, d2, cache = forward(weights, patch_batch(batch), refine_cfg)
    d1 = np.asarray(d1, dtype=np.float64).copy()
    d2 = np.asarray(d2, dtype=np.float64).copy()
    d1[batch.skipped] = 0.0
    d2[batch.skipped] = 0.0
    ol = offset_loss(batch, d1, d2, t_px)
    loss, inlier, valid, p1, p2 = ol.loss, ol.inlier, ol.valid, ol.p1, ol.p2
    n_used = int(valid.sum())
    grads = backward(weights, cache, ol.grad1, ol.grad2)

    keep = valid & ~batch.is_outlier
    return BatchResult(
        loss=loss,
        grads=grads,
        n_inliers=int(inlier.sum()),
        n_used=n_used,
        n_excluded=n - n_used,
        epi_px_refined=epipolar_px(batch.subset(keep), p1[keep], p2[keep]),
        epi_px_unrefined=epipolar_px(batch.subset(keep), batch.quantized1[keep], batch.quantized2[keep]),
        delta1=d1,
        delta2=d2,
    )


class BatchSampler:
    """Seeded shuffled epochs; the batch for a step depends only on ``(seed, step)``."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise InvalidInputError("cannot sample from an empty dataset")
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self._perms: dict = {}

    def _perm(self, epoch):
        if epoch not in self._perms:
            if len(self._perms) > 4:
                self._perms.clear()
            self._perms[epoch] = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        return self._perms[epoch]

    def indices(self, step: int) -> np.ndarray:
        pos = np.arange(step * self.batch_size, (step + 1) * self.batch_size)
        return np.array([self._perm(p // self.n)[p % self.n] for p in pos])


@dataclass
class TrainState:
    weights: NetworkWeights
    adam: AdamState
    step: int = 0


def init_state(refine_cfg: RefineConfig, train_cfg: TrainConfig) -> TrainState:
    weights = NetworkWeights.init(refine_cfg, train_cfg.seed, np.float32)
    return TrainState(weights, AdamState.zeros_like(weights.parameters(), lr=train_cfg.lr), 0)


def save_state(path, state: TrainState, refine_cfg: RefineConfig, train_cfg: TrainConfig):
    return ckpt.save_checkpoint(path, state.weights, refine_cfg, state.adam, extra={"train": train_cfg.to_dict()})


def load_state(path, refine_cfg: RefineConfig | None = None) -> tuple:
    weights, cfg, adam, extra = ckpt.load_checkpoint(path, refine_cfg)
    if adam is None:
        adam = AdamState.zeros_like(weights.parameters())
    return TrainState(weights, adam, adam.step), cfg, extra


def train(
    dataset: Dataset,
    refine_cfg: RefineConfig,
    train_cfg: TrainConfig = TrainConfig(),
    out_dir=None,
    resume: TrainState | None = None,
    progress=None,
) -> tuple:
    """Run ``train_cfg.steps`` total optimizer steps (counting any resumed ones).

    Returns ``(state, log_rows)``. With ``out_dir`` set, writes ``train_log.csv``,
    periodic ``ckpt_<step>`` directories and a ``final`` checkpoint.
    """
    if refine_cfg.variant is Variant.SAM_ONLY:
        raise ConfigurationError("sam-only has no trainable parameters")
    if dataset.descriptor_dim != refine_cfg.descriptor_dim:
        raise ConfigurationError(
            f"dataset descriptors have D={dataset.descriptor_dim}, network expects {refine_cfg.descriptor_dim}"
        )
    state = resume if resume is not None else init_state(refine_cfg, train_cfg)
    state.weights.check(refine_cfg)
    state.adam.lr = train_cfg.lr
    sampler = BatchSampler(len(dataset), train_cfg.batch_size, train_cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        fresh = state.step == 0 or not log_path.exists()
        fh = log_path.open("w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)

    rows = []
    window = _Window()
    try:
        while state.step < train_cfg.steps:
            batch = dataset.subset(sampler.indices(state.step))
            try:
                res = batch_loss(state.weights, batch, refine_cfg, train_cfg.t_px)
                finite = np.isfinite(res.loss) and all(np.all(np.isfinite(g)) for g in res.grads)
            except NumericalError:
                finite = False
            if not finite:
                snap = None
                if out_dir is not None:
                    snap = save_state(out_dir / "diagnostic", state, refine_cfg, train_cfg)
                raise NumericalError(f"non-finite loss at step {state.step}; snapshot at {snap}")
            if res.n_excluded:
                log.warning("step %d: excluded %d degenerate matches", state.step, res.n_excluded)
            adam_step(state.weights.parameters(), res.grads, state.adam)
            state.weights.mark_updated()
            state.step += 1
            window.add(res)
            if state.step % train_cfg.log_every == 0 or state.step == train_cfg.steps:
                row = window.flush(state.step)
                rows.append(row)
                if writer is not None:
                    writer.writerow(_fmt_row(row))
                    fh.flush()
                if progress is not None:
                    progress(row)
            if out_dir is not None and state.step % train_cfg.checkpoint_every == 0:
                save_state(out_dir / f"ckpt_{state.step:07d}", state, refine_cfg, train_cfg)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_state(out_dir / "final", state, refine_cfg, train_cfg)
    return state, rows


class _Window:
    def __init__(self):
        self.reset()

    def reset(self):
        self.loss = []
        self.inl = 0
        self.used = 0
        self.ref = []
        self.unref = []

    def add(self, res: BatchResult):
        self.loss.append(res.loss)
        self.inl += res.n_inliers
        self.used += res.n_used
        self.ref.append(res.epi_px_refined)
        self.unref.append(res.epi_px_unrefined)

    def flush(self, step):
        ref = np.concatenate(self.ref) if self.ref else np.zeros(0)
        unref = np.concatenate(self.unref) if self.unref else np.zeros(0)
        row = {
            "step": step,
            "loss": float(np.mean(self.loss)) if self.loss else 0.0,
            "inlier_frac": self.inl / self.used if self.used else 0.0,
            "mean_epi_px_refined": float(ref.mean()) if ref.size else float("nan"),
            "mean_epi_px_unrefined": float(unref.mean()) if unref.size else float("nan"),
        }
        self.reset()
        return row


def _fmt_row(row):
    return [row["step"]] + [repr(float(row[k])) for k in LOG_HEADER[1:]]
