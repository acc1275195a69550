"""scikit-learn style front ends.

``KeypointRefiner`` is a transformer: ``fit`` trains the refinement network on
a :class:`~kprefine.synthetic.Dataset`, ``transform`` returns refined
keypoints. ``EssentialMatrixRansac`` fits an essential matrix to an
``(N, 4)`` array of pixel correspondences ``[x1, y1, x2, y2]``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, InvalidInputError
from .geometry import CameraIntrinsics, normalize_point, normalized_threshold
from .nn import AdamState
from .pipeline import RefinedMatches, refine_dataset
from .ransac import RansacConfig, msac_score, ransac
from .refine import NetworkWeights, RefineConfig, Variant
from .synthetic import Dataset
from .trainer import TrainConfig, TrainState, train


def check_dataset(X) -> Dataset:
    if not isinstance(X, Dataset):
        raise InvalidInputError(f"expected a Dataset, got {type(X).__name__}")
    if len(X) == 0:
        raise InvalidInputError("empty dataset")
    for name in ("patch1", "patch2", "d1", "d2", "quantized1", "quantized2"):
        if not np.all(np.isfinite(getattr(X, name))):
            raise InvalidInputError(f"non-finite values in {name}")
    return X


def check_correspondences(X) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_min_samples=8)
    if X.shape[1] != 4:
        raise InvalidInputError(f"correspondences must be (N, 4) [x1, y1, x2, y2], got {X.shape}")
    return X


def _as_intrinsics(k) -> CameraIntrinsics:
    if isinstance(k, CameraIntrinsics):
        return k
    return CameraIntrinsics(*np.asarray(k, dtype=np.float64).ravel())


class KeypointRefiner(TransformerMixin, BaseEstimator):
    def __init__(
        self,
        variant="full",
        descriptor_dim=32,
        channels=(16, 16, 64, 64),
        use_score_channel=False,
        steps=5000,
        batch_size=8,
        lr=1e-4,
        t_px=1.5,
        random_state=0,
    ):
        self.variant = variant
        self.descriptor_dim = descriptor_dim
        self.channels = channels
        self.use_score_channel = use_score_channel
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.t_px = t_px
        self.random_state = random_state

    def _configs(self):
        rc = RefineConfig(
            channels=tuple(self.channels),
            descriptor_dim=self.descriptor_dim,
            use_score_channel=self.use_score_channel,
            variant=self.variant,
        )
        tc = TrainConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr, t_px=self.t_px, seed=int(self.random_state)
        )
        return rc, tc

    def fit(self, X, y=None, out_dir=None):
        X = check_dataset(X)
        rc, tc = self._configs()
        if rc.variant is Variant.SAM_ONLY:
            self.weights_ = NetworkWeights([], None)
            self.train_log_ = []
            self.n_steps_ = 0
        else:
            state, rows = train(X, rc, tc, out_dir=out_dir)
            self.weights_ = state.weights
            self.adam_ = state.adam
            self.train_log_ = rows
            self.n_steps_ = state.step
        self.config_ = rc
        return self

    @classmethod
    def from_weights(cls, weights: NetworkWeights, cfg: RefineConfig, adam: AdamState | None = None):
        est = cls(
            variant=cfg.variant.value,
            descriptor_dim=cfg.descriptor_dim,
            channels=cfg.channels,
            use_score_channel=cfg.use_score_channel,
        )
        weights.check(cfg)
        est.weights_ = weights
        est.config_ = cfg
        est.n_steps_ = adam.step if adam is not None else 0
        if adam is not None:
            est.adam_ = adam
        return est

    def refine(self, X) -> RefinedMatches:
        check_is_fitted(self, "weights_")
        return refine_dataset(self.weights_, self.config_, check_dataset(X))

    def transform(self, X):
        """Refined keypoints as an ``(N, 4)`` array ``[x1, y1, x2, y2]``."""
        rm = self.refine(X)
        return np.hstack([rm.p1_refined, rm.p2_refined])

    def state(self) -> TrainState:
        check_is_fitted(self, "weights_")
        if not hasattr(self, "adam_"):
            raise ConfigurationError("no optimizer state; estimator was not trained")
        return TrainState(self.weights_, self.adam_, self.n_steps_)


class EssentialMatrixRansac(BaseEstimator):
    def __init__(self, threshold_px=1.0, iterations=1000, msac_margin_factor=1.5, lo_iterations=20, random_state=0):
        self.threshold_px = threshold_px
        self.iterations = iterations
        self.msac_margin_factor = msac_margin_factor
        self.lo_iterations = lo_iterations
        self.random_state = random_state

    def _cfg(self):
        return RansacConfig(
            threshold_px=self.threshold_px,
            msac_margin_factor=self.msac_margin_factor,
            iterations=self.iterations,
            seed=int(self.random_state),
            lo_iterations=self.lo_iterations,
        )

    def fit(self, X, y=None, *, k1, k2):
        X = check_correspondences(X)
        k1, k2 = _as_intrinsics(k1), _as_intrinsics(k2)
        res = ransac(X[:, :2], X[:, 2:], k1, k2, self._cfg())
        self.k1_, self.k2_ = k1, k2
        self.result_ = res
        self.essential_ = res.e
        self.pose_ = res.pose
        self.inlier_mask_ = res.inlier_mask
        self.inlier_ratio_ = res.inlier_ratio
        return self

    def _normalized(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=np.float64)
        return normalize_point(self.k1_, X[:, :2]), normalize_point(self.k2_, X[:, 2:])

    def predict(self, X):
        """Inlier mask of ``X`` under the fitted model (all False if estimation failed)."""
        n1, n2 = self._normalized(X)
        if self.essential_ is None:
            return np.zeros(len(n1), dtype=bool)
        t = normalized_threshold(self.threshold_px, self.k1_, self.k2_)
        return msac_score(self.essential_, n1, n2, t, self.msac_margin_factor)[1]

    def score(self, X, y=None):
        """Negated MSAC score (higher is better, sklearn convention)."""
        n1, n2 = self._normalized(X)
        if self.essential_ is None:
            return -np.inf
        t = normalized_threshold(self.threshold_px, self.k1_, self.k2_)
        return -float(msac_score(self.essential_, n1, n2, t, self.msac_margin_factor)[0])
