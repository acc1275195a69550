"""Synthetic two-view correspondences with exact geometry and sub-pixel appearance.

Each image pair gets a random relative pose and intrinsics; each 3D point
gets a small Gaussian-blob texture whose dominant blob sits exactly on the
point's projection. Detections are the projections rounded to the pixel
grid (plus optional jitter), so the true sub-pixel location is recoverable
from the rendered patch.

Every random draw comes from a generator seeded by ``(seed, pair, ...)``,
so any record can be regenerated in isolation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .exceptions import GenerationError, InvalidInputError
from .geometry import (
    CameraIntrinsics,
    RelativePose,
    epipolar_distance,
    essential_from_pose,
    mean_focal,
    normalize_point,
    rotation_from_axis_angle,
)
from .refine import round_half_away

PATCH = 11
PATCH_DECIMALS = 6

# stream tags for counter-based seeding
_POSE, _RECORD, _TEXTURE, _DESCRIPTOR, _SHARED = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 42
    num_points: int = 200  # correspondences per image pair
    image_size: tuple = (640, 480)
    focal_range: tuple = (400.0, 700.0)
    depth_range: tuple = (10.0, 40.0)
    max_rotation: float = 15.0  # degrees
    fixed_translation: tuple | None = None
    texture_blobs: int = 4
    blob_sigma_range: tuple = (1.0, 1.8)
    affine_jitter: float = 0.1
    photometric_noise: float = 0.01
    descriptor_dim: int = 32
    descriptor_noise: float = 0.1
    descriptor_shared: float = 0.6
    keypoint_jitter: float = 0.0
    outlier_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        for name in ("focal_range", "depth_range", "blob_sigma_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (0 < lo <= hi):
                raise InvalidInputError(f"{name} must be a positive interval, got {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        if self.fixed_translation is not None:
            object.__setattr__(self, "fixed_translation", tuple(float(v) for v in self.fixed_translation))
        if self.num_points < 1 or self.texture_blobs < 1 or self.descriptor_dim < 1:
            raise InvalidInputError("num_points, texture_blobs and descriptor_dim must be positive")
        if min(self.image_size) <= PATCH:
            raise InvalidInputError("image too small for a patch")
        if not 0 <= self.outlier_fraction < 1:
            raise InvalidInputError("outlier_fraction must lie in [0, 1)")
        if self.max_rotation < 0 or self.keypoint_jitter < 0 or self.affine_jitter < 0:
            raise InvalidInputError("max_rotation, keypoint_jitter and affine_jitter must be non-negative")
        if self.photometric_noise < 0 or self.descriptor_noise < 0 or self.descriptor_shared < 0:
            raise InvalidInputError("noise levels must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class PairGeometry:
    pose: RelativePose
    k1: CameraIntrinsics
    k2: CameraIntrinsics
    points: np.ndarray  # (num_points, 3) in camera-1 coordinates

    @property
    def essential(self) -> np.ndarray:
        return essential_from_pose(self.pose)

    def project(self):
        """Pixel projections ``(N, 2)`` in both views."""
        x1 = self.points @ self.k1.matrix.T
        x2 = (self.points @ self.pose.rotation.T + self.pose.translation) @ self.k2.matrix.T
        return x1[:, :2] / x1[:, 2:], x2[:, :2] / x2[:, 2:]


def _rng(cfg: SceneConfig, *stream) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *stream])


def _random_unit(rng, n):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def sample_two_view(cfg: SceneConfig, index: int, max_tries: int = 50) -> PairGeometry:
    """Pose, intrinsics and ``num_points`` 3D points visible in both views."""
    rng = _rng(cfg, index, _POSE)
    w, h = cfg.image_size
    angle = np.radians(rng.uniform(0.0, cfg.max_rotation))
    R = rotation_from_axis_angle(_random_unit(rng, 3), angle)
    t = np.asarray(cfg.fixed_translation) if cfg.fixed_translation is not None else _random_unit(rng, 3)
    pose = RelativePose(R, t)
    f1, f2 = rng.uniform(*cfg.focal_range, size=2)
    k1 = CameraIntrinsics(f1, f1, w / 2.0, h / 2.0)
    k2 = CameraIntrinsics(f2, f2, w / 2.0, h / 2.0)
    k1_inv = np.linalg.inv(k1.matrix)

    pts = []
    need = cfg.num_points
    for _ in range(max_tries):
        m = 4 * need + 16
        uv = np.column_stack([rng.uniform(0, w, m), rng.uniform(0, h, m), np.ones(m)])
        depth = rng.uniform(*cfg.depth_range, m)
        X = (uv @ k1_inv.T) * depth[:, None]
        X2 = X @ pose.rotation.T + pose.translation
        with np.errstate(divide="ignore", invalid="ignore"):
            p2 = (X2 @ k2.matrix.T)[:, :2] / X2[:, 2:]
        ok = (X2[:, 2] > 0) & (p2[:, 0] >= 0) & (p2[:, 0] < w) & (p2[:, 1] >= 0) & (p2[:, 1] < h)
        pts.append(X[ok][:need])
        need -= min(need, int(ok.sum()))
        if need == 0:
            break
    if need:
        raise GenerationError(f"pair {index}: could not place {cfg.num_points} co-visible points")
    return PairGeometry(pose, k1, k2, np.concatenate(pts))


@dataclass
class Texture:
    """Blob mixture in a frame centred on the keypoint; blob 0 sits at the origin."""

    centers: np.ndarray  # (K, 2)
    sigmas: np.ndarray  # (K,)
    amplitudes: np.ndarray  # (K,)

    def __call__(self, offsets):
        d2 = np.sum((offsets[..., None, :] - self.centers) ** 2, axis=-1)
        return np.sum(self.amplitudes * np.exp(-d2 / (2 * self.sigmas**2)), axis=-1)


def make_texture(cfg: SceneConfig, pair: int, point: int) -> Texture:
    rng = _rng(cfg, pair, point, _TEXTURE)
    k = cfg.texture_blobs
    radius = rng.uniform(3.0, 5.0, k - 1)
    theta = rng.uniform(0, 2 * np.pi, k - 1)
    centers = np.vstack([[0.0, 0.0], np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])])
    sigmas = rng.uniform(*cfg.blob_sigma_range, k)
    amplitudes = np.concatenate([[1.0], rng.uniform(0.2, 0.5, k - 1)])
    return Texture(centers, sigmas, amplitudes)


def _pixel_grid(center):
    r = PATCH // 2
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1]
    return np.stack([xs + center[0], ys + center[1]], axis=-1).astype(np.float64)


def render_patch(cfg: SceneConfig, texture: Texture, true_center, window_center, view: int, rng):
    """Image and score patches for a window around ``window_center``.

    View 2 sees the texture through a random affine map bounded by
    ``affine_jitter``; both views receive additive Gaussian noise and are
    clamped to [0, 1]. The score patch is the dominant blob's response,
    normalised to peak at 1 on the pixel nearest ``true_center``.
    """
    true_center = np.asarray(true_center, dtype=np.float64)
    grid = _pixel_grid(window_center)
    offs = grid - true_center
    if view == 2 and cfg.affine_jitter > 0:
        a = np.eye(2) + rng.uniform(-cfg.affine_jitter, cfg.affine_jitter, (2, 2))
        offs = offs @ np.linalg.inv(a).T
    img = texture(offs)
    if cfg.photometric_noise > 0:
        img = img + rng.normal(0.0, cfg.photometric_noise, img.shape)
    img = np.clip(img, 0.0, 1.0)

    s0 = texture.sigmas[0]
    d2 = np.sum((grid - true_center) ** 2, axis=-1)
    nearest = round_half_away(true_center)
    d2_near = np.sum((nearest - true_center) ** 2)
    score = np.exp(-(d2 - d2_near) / (2 * s0**2))
    return img, score


def shared_direction(cfg: SceneConfig) -> np.ndarray:
    return _random_unit(_rng(cfg, _SHARED), cfg.descriptor_dim)


def base_descriptor(cfg: SceneConfig, pair: int, point: int, shared=None) -> np.ndarray:
    if shared is None:
        shared = shared_direction(cfg)
    rng = _rng(cfg, pair, point, _DESCRIPTOR)
    v = cfg.descriptor_shared * shared + _random_unit(rng, cfg.descriptor_dim)
    return v / np.linalg.norm(v)


def make_descriptors(cfg: SceneConfig, base1, base2, rng):
    """Per-view descriptors: base plus isotropic noise of total std ``descriptor_noise``, unit length."""
    out = []
    for base in (base1, base2):
        d = base + rng.normal(0.0, cfg.descriptor_noise / np.sqrt(cfg.descriptor_dim), cfg.descriptor_dim)
        out.append(d / np.linalg.norm(d))
    return out


def outlier_flags(n: int, fraction: float) -> np.ndarray:
    """Evenly interleaved outlier marks: exactly ``floor(n * fraction)`` of ``n`` are set."""
    f = Fraction(str(fraction))
    i = np.arange(n + 1)
    marks = np.array([(k * f.numerator) // f.denominator for k in i])
    return np.diff(marks) == 1


def _window_inside(center, cfg: SceneConfig) -> bool:
    r = PATCH // 2
    c = round_half_away(center)
    w, h = cfg.image_size
    return bool(c[0] - r >= 0 and c[1] - r >= 0 and c[0] + r < w and c[1] + r < h)


def _round_list(a, decimals=None):
    a = np.asarray(a, dtype=np.float64)
    if decimals is not None:
        a = np.round(a, decimals) + 0.0  # drops negative zeros
    return a.ravel().tolist()


class _PairCache:
    def __init__(self, cfg):
        self.cfg = cfg
        self.index = None
        self.shared = shared_direction(cfg)

    def get(self, pair):
        if pair != self.index:
            self.geom = sample_two_view(self.cfg, pair)
            self.proj1, self.proj2 = self.geom.project()
            self.index = pair
        return self


def make_record(cfg: SceneConfig, sample_id: int, is_outlier: bool, cache: _PairCache | None = None) -> dict:
    """One correspondence as a JSON-ready dict."""
    cache = cache or _PairCache(cfg)
    pair, local = divmod(sample_id, cfg.num_points)
    pc = cache.get(pair)
    geom = pc.geom
    rng = _rng(cfg, pair, local, _RECORD)
    other = local
    if is_outlier and cfg.num_points > 1:
        other = int((local + 1 + rng.integers(cfg.num_points - 1)) % cfg.num_points)
    true1 = pc.proj1[local]
    true2 = pc.proj2[other]
    q1 = round_half_away(true1) + rng.uniform(-cfg.keypoint_jitter, cfg.keypoint_jitter, 2)
    q2 = round_half_away(true2) + rng.uniform(-cfg.keypoint_jitter, cfg.keypoint_jitter, 2)

    patches = []
    for view, point, true, q in ((1, local, true1, q1), (2, other, true2, q2)):
        if _window_inside(q, cfg):
            img, score = render_patch(cfg, make_texture(cfg, pair, point), true, round_half_away(q), view, rng)
            patches.append((_round_list(img, PATCH_DECIMALS), _round_list(score, PATCH_DECIMALS)))
        else:
            patches.append((None, None))
    b1 = base_descriptor(cfg, pair, local, pc.shared)
    b2 = base_descriptor(cfg, pair, other, pc.shared)
    d1, d2 = make_descriptors(cfg, b1, b2, rng)
    k1, k2 = geom.k1, geom.k2
    return {
        "sample_id": int(sample_id),
        "pair_id": int(pair),
        "patch1": patches[0][0],
        "patch2": patches[1][0],
        "score1": patches[0][1],
        "score2": patches[1][1],
        "d1": _round_list(d1),
        "d2": _round_list(d2),
        "true1": _round_list(true1),
        "true2": _round_list(true2),
        "quantized1": _round_list(q1),
        "quantized2": _round_list(q2),
        "fx1": k1.fx, "fy1": k1.fy, "cx1": k1.cx, "cy1": k1.cy,
        "fx2": k2.fx, "fy2": k2.fy, "cx2": k2.cx, "cy2": k2.cy,
        "E": _round_list(geom.essential),
        "R": _round_list(geom.pose.rotation),
        "t": _round_list(geom.pose.translation),
        "is_outlier": bool(is_outlier),
    }


def iter_records(cfg: SceneConfig, n_samples: int, start: int = 0):
    flags = outlier_flags(start + n_samples, cfg.outlier_fraction)
    cache = _PairCache(cfg)
    for sid in range(start, start + n_samples):
        yield make_record(cfg, sid, bool(flags[sid]), cache)


def generate_dataset(cfg: SceneConfig, n_samples: int, path, start: int = 0) -> str:
    """Write ``n_samples`` JSON-lines records; returns the SHA-256 of the file."""
    path = Path(path)
    digest = hashlib.sha256()
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in iter_records(cfg, n_samples, start):
            line = json.dumps(rec, separators=(",", ":")) + "\n"
            digest.update(line.encode())
            fh.write(line)
    return digest.hexdigest()


@dataclass
class Dataset:
    """Columnar view of a dataset file. Missing (border) patches are zero-filled and flagged."""

    sample_id: np.ndarray
    pair_id: np.ndarray
    patch1: np.ndarray
    patch2: np.ndarray
    score1: np.ndarray
    score2: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    true1: np.ndarray
    true2: np.ndarray
    quantized1: np.ndarray
    quantized2: np.ndarray
    k1: np.ndarray  # (N, 4) fx, fy, cx, cy
    k2: np.ndarray
    E: np.ndarray
    R: np.ndarray
    t: np.ndarray
    is_outlier: np.ndarray
    skipped: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.sample_id)

    def subset(self, idx) -> "Dataset":
        return Dataset(**{k: getattr(self, k)[idx] for k in self.__dataclass_fields__})

    def intrinsics(self, i: int):
        return CameraIntrinsics(*self.k1[i]), CameraIntrinsics(*self.k2[i])

    def pair_indices(self):
        """``{pair_id: row indices}`` in first-appearance order."""
        groups: dict = {}
        for i, p in enumerate(self.pair_id.tolist()):
            groups.setdefault(p, []).append(i)
        return {p: np.asarray(v) for p, v in groups.items()}

    @property
    def descriptor_dim(self) -> int:
        return self.d1.shape[1]


REQUIRED_FIELDS = (
    "sample_id", "patch1", "patch2", "score1", "score2", "d1", "d2", "true1", "true2",
    "quantized1", "quantized2", "fx1", "fy1", "cx1", "cy1", "fx2", "fy2", "cx2", "cy2",
    "E", "R", "t", "is_outlier",
)


def records_to_dataset(records) -> Dataset:
    records = list(records)
    if not records:
        raise InvalidInputError("empty dataset")
    for rec in records:
        missing = [k for k in REQUIRED_FIELDS if k not in rec]
        if missing:
            raise InvalidInputError(f"record {rec.get('sample_id')} missing fields {missing}")
    n = len(records)
    area = PATCH * PATCH

    def patches(key):
        out = np.zeros((n, PATCH, PATCH))
        present = np.zeros(n, dtype=bool)
        for i, rec in enumerate(records):
            if rec[key] is not None:
                if len(rec[key]) != area:
                    raise InvalidInputError(f"{key} of record {rec['sample_id']} is not {PATCH}x{PATCH}")
                out[i] = np.asarray(rec[key]).reshape(PATCH, PATCH)
                present[i] = True
        return out, present

    p1, ok1 = patches("patch1")
    p2, ok2 = patches("patch2")
    s1, _ = patches("score1")
    s2, _ = patches("score2")

    def col(key):
        return np.asarray([rec[key] for rec in records], dtype=np.float64)

    return Dataset(
        sample_id=np.asarray([r["sample_id"] for r in records], dtype=np.int64),
        pair_id=np.asarray([r.get("pair_id", r["sample_id"]) for r in records], dtype=np.int64),
        patch1=p1, patch2=p2, score1=s1, score2=s2,
        d1=col("d1"), d2=col("d2"),
        true1=col("true1"), true2=col("true2"),
        quantized1=col("quantized1"), quantized2=col("quantized2"),
        k1=np.column_stack([col("fx1"), col("fy1"), col("cx1"), col("cy1")]),
        k2=np.column_stack([col("fx2"), col("fy2"), col("cx2"), col("cy2")]),
        E=col("E").reshape(n, 3, 3), R=col("R").reshape(n, 3, 3), t=col("t"),
        is_outlier=np.asarray([r["is_outlier"] for r in records], dtype=bool),
        skipped=~(ok1 & ok2),
    )


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(encoding="utf-8") as fh:
        return records_to_dataset(json.loads(line) for line in fh if line.strip())


def make_dataset(cfg: SceneConfig, n_samples: int, start: int = 0) -> Dataset:
    """In-memory equivalent of ``generate_dataset`` followed by ``load_dataset``."""
    return records_to_dataset(iter_records(cfg, n_samples, start))


def _normalized(ds: Dataset, p1, p2):
    n1 = np.empty((len(ds), 3))
    n2 = np.empty((len(ds), 3))
    n1[:, 0] = (p1[:, 0] - ds.k1[:, 2]) / ds.k1[:, 0]
    n1[:, 1] = (p1[:, 1] - ds.k1[:, 3]) / ds.k1[:, 1]
    n2[:, 0] = (p2[:, 0] - ds.k2[:, 2]) / ds.k2[:, 0]
    n2[:, 1] = (p2[:, 1] - ds.k2[:, 3]) / ds.k2[:, 1]
    n1[:, 2] = n2[:, 2] = 1.0
    return n1, n2


def epipolar_px(ds: Dataset, p1, p2) -> np.ndarray:
    """Per-match epipolar distance in pixels (normalized distance times the mean focal)."""
    n1, n2 = _normalized(ds, np.asarray(p1), np.asarray(p2))
    num = np.einsum("ni,nij,nj->n", n2, ds.E, n1)
    a = np.einsum("nij,nj->ni", ds.E, n1)
    b = np.einsum("nji,nj->ni", ds.E, n2)
    den = a[:, 0] ** 2 + a[:, 1] ** 2 + b[:, 0] ** 2 + b[:, 1] ** 2
    focal = (ds.k1[:, 0] + ds.k1[:, 1] + ds.k2[:, 0] + ds.k2[:, 1]) / 4.0
    return np.abs(num) / np.sqrt(den) * focal


def epipolar_px_oracle(ds: Dataset, p1, p2) -> np.ndarray:
    """Row-by-row reference for :func:`epipolar_px` built on the scalar geometry routines."""
    out = np.empty(len(ds))
    for i in range(len(ds)):
        k1, k2 = ds.intrinsics(i)
        d = epipolar_distance(normalize_point(k1, p1[i]), normalize_point(k2, p2[i]), ds.E[i])
        out[i] = d * mean_focal(k1, k2)
    return out
