"""Descriptor-guided keypoint refinement network.

A five-layer 3x3 convnet, shared between the two views, turns each image
patch into a dense L2-normalized feature map. The map is scored against a
query vector (the mean of the two matched descriptors in the full model),
and the SoftArgMax of the score map, scaled back to patch pixels, is the
keypoint displacement.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, InvalidInputError, InvalidStateError
from .nn import (
    SAME,
    VALID,
    ConvParams,
    conv2d_backward,
    conv2d_forward,
    l2_normalize_channels,
    l2_normalize_channels_backward,
    relu,
    relu_backward,
    softargmax2d,
    softargmax2d_backward,
)

PADDING_PLAN = (VALID, SAME, VALID, SAME, VALID)
FEATURE_EPS = 1e-8


class Variant(str, enum.Enum):
    FULL = "full"  # CNN features scored by the mean descriptor
    CNN_DG = "cnn-dg"  # each view scored by its own descriptor
    CNN_ONLY = "cnn-only"  # learned 1x1 projection, no descriptors
    SAM_ONLY = "sam-only"  # SoftArgMax on the detector score patch, no network

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for v in cls:
            if v.value == key:
                return v
        raise ConfigurationError(f"unknown variant {value!r}; choose from {[v.value for v in cls]}")


@dataclass(frozen=True)
class RefineConfig:
    input_patch: int = 11
    output_map: int = 5
    channels: tuple = (16, 16, 64, 64)
    descriptor_dim: int = 32
    use_score_channel: bool = False
    variant: Variant = Variant.FULL

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.input_patch % 2 == 0 or self.output_map % 2 == 0:
            raise ConfigurationError("input_patch and output_map must be odd")
        if self.input_patch - 6 != self.output_map:
            raise ConfigurationError(
                f"three valid 3x3 layers map {self.input_patch} to {self.input_patch - 6}, "
                f"not output_map={self.output_map}"
            )
        if len(self.channels) != 4:
            raise ConfigurationError("channels lists the four hidden layer widths")
        c = self.channels
        if c[0] != c[1] or c[2] != c[3]:
            raise ConfigurationError("same-padded layers must keep their channel count")
        if self.descriptor_dim < 1:
            raise ConfigurationError("descriptor_dim must be positive")

    @property
    def sigma(self) -> float:
        if self.variant is Variant.SAM_ONLY:
            return 1.0
        return (self.input_patch // 2) / (self.output_map // 2)

    @property
    def in_channels(self) -> int:
        return 2 if self.use_score_channel else 1

    @property
    def max_offset(self) -> float:
        """Largest displacement component the module can produce, in pixels."""
        return self.input_patch // 2

    def layer_shapes(self):
        plan = (self.in_channels,) + self.channels + (self.descriptor_dim,)
        return [(plan[i + 1], plan[i], 3, 3) for i in range(5)]

    def to_dict(self) -> dict:
        return {
            "input_patch": self.input_patch,
            "output_map": self.output_map,
            "channels": list(self.channels),
            "descriptor_dim": self.descriptor_dim,
            "use_score_channel": self.use_score_channel,
            "variant": self.variant.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def expected_param_count(cfg: RefineConfig) -> int:
    if cfg.variant is Variant.SAM_ONLY:
        return 0
    n = sum(o * i * 9 + o for o, i, _, _ in cfg.layer_shapes())
    if cfg.variant is Variant.CNN_ONLY:
        n += cfg.descriptor_dim
    return n


@dataclass
class NetworkWeights:
    layers: list
    head: np.ndarray | None = None
    version: int = 0

    @classmethod
    def init(cls, cfg: RefineConfig, seed: int = 0, dtype=np.float32) -> "NetworkWeights":
        """Fan-in scaled uniform kernels, zero biases."""
        if cfg.variant is Variant.SAM_ONLY:
            return cls([], None)
        rng = np.random.default_rng(seed)
        layers = []
        for shape, pad in zip(cfg.layer_shapes(), PADDING_PLAN):
            fan_in = shape[1] * 9
            bound = np.sqrt(6.0 / fan_in)
            k = rng.uniform(-bound, bound, size=shape).astype(dtype)
            layers.append(ConvParams(k, np.zeros(shape[0], dtype=dtype), pad))
        head = None
        if cfg.variant is Variant.CNN_ONLY:
            bound = np.sqrt(6.0 / cfg.descriptor_dim)
            head = rng.uniform(-bound, bound, size=cfg.descriptor_dim).astype(dtype)
        return cls(layers, head)

    def parameters(self) -> list:
        """Trainable arrays in declaration order (kernels, bias per layer, then head)."""
        out = []
        for layer in self.layers:
            out += [layer.kernels, layer.bias]
        if self.head is not None:
            out.append(self.head)
        return out

    def parameter_names(self) -> list:
        names = []
        for i in range(len(self.layers)):
            names += [f"conv{i + 1}.kernels", f"conv{i + 1}.bias"]
        if self.head is not None:
            names.append("head")
        return names

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "NetworkWeights":
        layers = [ConvParams(l.kernels.astype(dtype), l.bias.astype(dtype), l.padding) for l in self.layers]
        head = None if self.head is None else self.head.astype(dtype)
        return NetworkWeights(layers, head)

    def copy(self) -> "NetworkWeights":
        return self.astype(self.dtype)

    def mark_updated(self):
        self.version += 1

    def check(self, cfg: RefineConfig):
        if cfg.variant is Variant.SAM_ONLY:
            return
        shapes = [l.kernels.shape for l in self.layers]
        if shapes != cfg.layer_shapes():
            raise ConfigurationError(f"weight shapes {shapes} do not match config {cfg.layer_shapes()}")
        if (self.head is None) != (cfg.variant is not Variant.CNN_ONLY):
            raise ConfigurationError("projection head present iff variant is cnn-only")


@dataclass
class PatchBatch:
    """A batch of matched patches: images ``(B, P, P)``, optional scores, descriptors ``(B, D)``."""

    image1: np.ndarray
    image2: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    score1: np.ndarray | None = None
    score2: np.ndarray | None = None

    def __len__(self):
        return len(self.image1)

    def swapped(self) -> "PatchBatch":
        return PatchBatch(self.image2, self.image1, self.d2, self.d1, self.score2, self.score1)


@dataclass
class ForwardCache:
    version: int
    variant: Variant
    sigma: float
    inputs: list = field(default_factory=list)  # per-layer inputs
    pre: list = field(default_factory=list)  # per-layer pre-activations
    features_raw: np.ndarray | None = None
    features: np.ndarray | None = None
    query: np.ndarray | None = None
    offsets: np.ndarray | None = None
    probs: np.ndarray | None = None
    consumed: bool = False


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def extract_patch(image, keypoint, cfg: RefineConfig = RefineConfig(), score_map=None):
    """Window of ``cfg.input_patch`` pixels around the rounded keypoint.

    Returns ``(image_patch, score_patch)``, or ``None`` when the window would
    cross the image border (the match is then passed through unrefined).
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise InvalidInputError("image must be a nonempty 2D array")
    h, w = image.shape
    x, y = float(keypoint[0]), float(keypoint[1])
    if not (np.isfinite(x) and np.isfinite(y)) or not (0 <= x <= w and 0 <= y <= h):
        raise InvalidInputError(f"keypoint ({x}, {y}) outside a {w}x{h} image")
    cx, cy = round_half_away(x), round_half_away(y)
    r = cfg.input_patch // 2
    if cx - r < 0 or cy - r < 0 or cx + r >= w or cy + r >= h:
        return None
    win = (slice(cy - r, cy + r + 1), slice(cx - r, cx + r + 1))
    score_patch = None if score_map is None else np.asarray(score_map)[win]
    return image[win], score_patch


def _network_input(batch: PatchBatch, cfg: RefineConfig, dtype):
    img = np.concatenate([batch.image1, batch.image2]).astype(dtype)[:, None]
    if cfg.use_score_channel:
        if batch.score1 is None or batch.score2 is None:
            raise ConfigurationError("use_score_channel set but the batch has no score patches")
        sc = np.concatenate([batch.score1, batch.score2]).astype(dtype)[:, None]
        img = np.concatenate([img, sc], axis=1)
    return img


def _query(weights: NetworkWeights, batch: PatchBatch, cfg: RefineConfig, dtype):
    d1 = np.asarray(batch.d1, dtype=dtype)
    d2 = np.asarray(batch.d2, dtype=dtype)
    if d1.shape[-1] != cfg.descriptor_dim or d2.shape != d1.shape:
        raise InvalidInputError(f"descriptors {d1.shape}/{d2.shape} do not match D={cfg.descriptor_dim}")
    if cfg.variant is Variant.FULL:
        mean = (d1 + d2) / 2
        return np.concatenate([mean, mean])
    if cfg.variant is Variant.CNN_DG:
        return np.concatenate([d1, d2])
    return np.broadcast_to(weights.head, (2 * len(d1), cfg.descriptor_dim))


def forward(weights: NetworkWeights, batch: PatchBatch, cfg: RefineConfig):
    """Score maps and pixel displacements for both views.

    Returns ``(scores1, scores2, delta1, delta2, cache)``. Scores are
    ``(B, M, M)`` maps; deltas are ``(B, 2)`` in ``(x, y)`` pixel order.
    """
    b = len(batch)
    if cfg.variant is Variant.SAM_ONLY:
        if batch.score1 is None or batch.score2 is None:
            raise ConfigurationError("sam-only needs detector score patches")
        s = np.concatenate([batch.score1, batch.score2]).astype(np.float64)
        off, probs = softargmax2d(s)
        cache = ForwardCache(weights.version, cfg.variant, cfg.sigma, offsets=off, probs=probs)
        delta = cfg.sigma * off
        return s[:b], s[b:], delta[:b], delta[b:], cache

    dtype = weights.dtype
    x = _network_input(batch, cfg, dtype)
    cache = ForwardCache(weights.version, cfg.variant, cfg.sigma)
    for i, layer in enumerate(weights.layers):
        cache.inputs.append(x)
        z = conv2d_forward(x, layer)
        cache.pre.append(z)
        x = relu(z) if i < len(weights.layers) - 1 else z
    feats = l2_normalize_channels(x, FEATURE_EPS)
    q = _query(weights, batch, cfg, dtype)
    s = np.einsum("ndhw,nd->nhw", feats, q)
    off, probs = softargmax2d(s)
    cache.features_raw, cache.features, cache.query = x, feats, q
    cache.offsets, cache.probs = off, probs
    delta = cfg.sigma * off
    return s[:b], s[b:], delta[:b], delta[b:], cache


def apply_offsets(p1, p2, delta1, delta2, skipped=None):
    """Refined keypoints ``p + delta``; skipped matches keep ``p`` and get zero deltas."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    delta1 = np.array(delta1, dtype=np.float64)
    delta2 = np.array(delta2, dtype=np.float64)
    if skipped is not None:
        skipped = np.asarray(skipped, dtype=bool)
        delta1[skipped] = 0.0
        delta2[skipped] = 0.0
    return p1 + delta1, p2 + delta2, delta1, delta2


def backward(weights: NetworkWeights, cache: ForwardCache, grad_delta1, grad_delta2) -> list:
    """Gradients of the shared weights, ordered like ``weights.parameters()``.

    Descriptors and patches are treated as constants. A cache can be used
    once and only against the weights version that produced it.
    """
    if cache is None or cache.consumed:
        raise InvalidStateError("backward needs a fresh forward cache")
    if cache.version != weights.version:
        raise InvalidStateError("weights changed since the forward pass")
    cache.consumed = True
    if cache.variant is Variant.SAM_ONLY:
        return []
    dtype = weights.dtype
    g = np.concatenate([np.asarray(grad_delta1), np.asarray(grad_delta2)]).astype(dtype)
    ds = softargmax2d_backward(cache.probs, cache.offsets, cache.sigma * g)
    dfeat = ds[:, None, :, :] * cache.query[:, :, None, None]
    dhead = None
    if cache.variant is Variant.CNN_ONLY:
        dhead = np.einsum("nhw,ndhw->d", ds, cache.features)
    dx = l2_normalize_channels_backward(cache.features_raw, dfeat, FEATURE_EPS)
    grads = []
    n_layers = len(weights.layers)
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            dx = relu_backward(cache.pre[i], dx)
        dx, gk, gb = conv2d_backward(cache.inputs[i], weights.layers[i], dx)
        grads = [gk, gb] + grads
    if dhead is not None:
        grads.append(dhead)
    return grads
