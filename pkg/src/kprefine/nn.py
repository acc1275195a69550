"""Dense layers with explicit backward passes, Adam, and a finite-difference checker.

Activations are numpy arrays laid out ``(batch, channels, height, width)``.
Each ``*_forward`` returns the output; the matching ``*_backward`` takes the
forward inputs again plus the upstream gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import InvalidInputError, NonFiniteError

VALID = "valid"
SAME = "same"


@dataclass
class ConvParams:
    kernels: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray  # (out_ch,)
    padding: str = VALID

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[2:] != (3, 3):
            raise InvalidInputError(f"kernels must be (out, in, 3, 3), got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise InvalidInputError("bias length must equal out_ch")
        if self.padding not in (VALID, SAME):
            raise InvalidInputError(f"unknown padding {self.padding!r}")

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]


def _pad(x, padding):
    if padding == SAME:
        return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return x


def _columns(xp):
    # (N, C, Ho, Wo, 3, 3) -> (N*Ho*Wo, C*9)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9), (n, ho, wo)


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise InvalidInputError(f"input {x.shape} incompatible with {params.in_channels} input channels")
    if params.padding == VALID and min(x.shape[2:]) < 3:
        raise InvalidInputError("valid convolution needs spatial size >= 3")
    cols, (n, ho, wo) = _columns(_pad(x, params.padding))
    w = params.kernels.reshape(params.out_channels, -1)
    out = cols @ w.T + params.bias
    return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_kernels, grad_bias)``."""
    xp = _pad(x, params.padding)
    cols, (n, ho, wo) = _columns(xp)
    if grad_out.shape != (n, params.out_channels, ho, wo):
        raise InvalidInputError(f"grad_out shape {grad_out.shape} does not match forward output")
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
    w = params.kernels.reshape(params.out_channels, -1)
    grad_k = (g.T @ cols).reshape(params.kernels.shape)
    grad_b = g.sum(axis=0)
    dcols = (g @ w).reshape(n, ho, wo, params.in_channels, 3, 3)
    dxp = np.zeros_like(xp)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + ho, j : j + wo] += dcols[..., i, j].transpose(0, 3, 1, 2)
    if params.padding == SAME:
        dxp = dxp[:, :, 1:-1, 1:-1]
    return dxp, grad_k, grad_b


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # subgradient at exactly zero is taken as 0
    return grad_out * (x > 0)


def l2_normalize_channels(x, eps: float = 1e-8):
    """Divide each spatial location's channel vector by ``max(norm, eps)``."""
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    return x / np.maximum(norm, eps)


def l2_normalize_channels_backward(x, grad_out, eps: float = 1e-8):
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom
    proj = np.sum(grad_out * y, axis=1, keepdims=True)
    return np.where(norm > eps, (grad_out - y * proj) / denom, grad_out / eps)


def grid_offsets(p: int, dtype=np.float64):
    """Offsets ``(ux, uy)`` of every cell of a ``p x p`` map, row-major, each ``(p*p,)``."""
    if p < 1 or p % 2 == 0:
        raise InvalidInputError(f"score map size must be odd, got {p}")
    r = np.arange(p, dtype=dtype) - p // 2
    uy, ux = np.meshgrid(r, r, indexing="ij")
    return ux.ravel(), uy.ravel()


def softargmax2d(s):
    """Expected cell offset ``(x, y)`` under a softmax over a ``(..., P, P)`` score map.

    Returns ``(offsets, probs)`` where ``offsets`` has shape ``(..., 2)`` and
    ``probs`` is the flattened softmax needed by the backward pass.
    """
    s = np.asarray(s)
    if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
        raise InvalidInputError(f"score map must be square, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise NonFiniteError("non-finite score map")
    p = s.shape[-1]
    ux, uy = grid_offsets(p, s.dtype)
    flat = s.reshape(s.shape[:-2] + (p * p,))
    z = np.exp(flat - flat.max(axis=-1, keepdims=True))
    probs = z / z.sum(axis=-1, keepdims=True)
    # pair each cell with its mirror image so symmetric marginals cancel exactly
    grid = probs.reshape(probs.shape[:-1] + (p, p))
    px = grid.sum(axis=-2)
    py = grid.sum(axis=-1)
    u = np.arange(1, p // 2 + 1, dtype=s.dtype)
    m = p // 2
    ox = (px[..., m + 1 :] - px[..., m - 1 :: -1] if m else px[..., :0]) @ u
    oy = (py[..., m + 1 :] - py[..., m - 1 :: -1] if m else py[..., :0]) @ u
    # probabilities may sum to 1 + ulp; keep the expectation inside the grid
    return np.clip(np.stack([ox, oy], axis=-1), -m, m), probs


def softargmax2d_backward(probs, offsets, grad_out):
    """Gradient w.r.t. the score map, shaped like the forward input."""
    n_cells = probs.shape[-1]
    p = int(round(np.sqrt(n_cells)))
    ux, uy = grid_offsets(p, probs.dtype)
    gx = grad_out[..., 0:1]
    gy = grad_out[..., 1:2]
    centered = gx * (ux - offsets[..., 0:1]) + gy * (uy - offsets[..., 1:2])
    return (probs * centered).reshape(probs.shape[:-1] + (p, p))


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params, grads, state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidInputError("parameter, gradient and moment lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InvalidInputError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def finite_diff_check(f, params, grads, step: float = 1e-6, max_entries: int | None = None, seed: int = 0) -> float:
    """Relative error between ``grads`` and central differences of ``f``.

    For each array the error is ``|g - g_fd| / max(|g|, |g_fd|, floor)`` in
    the Euclidean norm and the worst array is returned. ``floor`` is 1e-8
    times the norm of the full gradient, so an array whose gradient is
    analytically zero is compared against the overall scale instead of its
    own round-off. Componentwise ratios are avoided on purpose: entries at
    the round-off floor of the differences would dominate them without
    saying anything about the backward pass.

    ``f()`` is re-evaluated after perturbing entries of ``params`` in place;
    entries are restored afterwards. With ``max_entries`` set, a seeded
    random subset of that many entries per array is checked.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            num[j] = (fp - fm) / (2.0 * step)
        pairs.append((np.asarray(g).reshape(-1)[idx], num))
    total = np.sqrt(sum(max(a @ a, n @ n) for a, n in pairs))
    floor = max(1e-8 * total, 1e-300)
    worst = 0.0
    for a, num in pairs:
        scale = max(np.linalg.norm(a), np.linalg.norm(num), floor)
        worst = max(worst, float(np.linalg.norm(a - num) / scale))
    return float(worst)

