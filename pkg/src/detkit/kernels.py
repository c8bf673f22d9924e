"""Dilated convolution, gridding analysis, additive attention gate and loss scalars.

Grids are indexed ``[y, x]`` (row-major). Kernel taps are indexed relative to
the kernel center, so ``output[p] = sum_t F[p - rate * t] * k[t]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

GRIDDING_EPS = 1e-12


@dataclass(frozen=True)
class Grid2D:
    width: int
    height: int
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != self.width * self.height:
            raise ValueError(f"{len(self.values)} values for a {self.width}x{self.height} grid")

    @classmethod
    def from_array(cls, arr) -> "Grid2D":
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
        return cls(arr.shape[1], arr.shape[0], tuple(arr.ravel().tolist()))

    def to_array(self) -> np.ndarray:
        return np.array(self.values, dtype=float).reshape(self.height, self.width)


def _as_array(g) -> np.ndarray:
    if isinstance(g, Grid2D):
        return g.to_array()
    arr = np.asarray(g, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {arr.shape}")
    return arr


def receptive_field(kernel_side: int, rate: int) -> int:
    """Extent of a ``kernel_side`` kernel dilated by ``rate``."""
    if kernel_side < 1 or kernel_side % 2 == 0:
        raise ValueError(f"kernel side must be a positive odd integer, got {kernel_side}")
    if rate < 1:
        raise ValueError(f"dilation rate must be >= 1, got {rate}")
    return (kernel_side - 1) * rate + 1


def dilated_conv2d(F, k, rate: int = 1, padding: str = "same") -> np.ndarray:
    """Dilated 2-D convolution of a single-channel grid.

    ``same`` zero-extends the input and returns an output shaped like it;
    ``valid`` returns only positions whose every tap lands inside the input.
    With ``rate == 1`` this is ordinary (flipped-kernel) convolution.
    """
    F = _as_array(F)
    k = _as_array(k)
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel sides must be odd, got {k.shape}")
    if rate < 1 or int(rate) != rate:
        raise ValueError(f"dilation rate must be a positive integer, got {rate}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    ry, rx = (kh // 2) * rate, (kw // 2) * rate
    H, W = F.shape
    padded = np.pad(F, ((ry, ry), (rx, rx)))
    out = np.zeros_like(F)
    for ty in range(-(kh // 2), kh // 2 + 1):
        for tx in range(-(kw // 2), kw // 2 + 1):
            w = k[ty + kh // 2, tx + kw // 2]
            if w == 0:
                continue
            oy, ox = ry - rate * ty, rx - rate * tx
            out += w * padded[oy:oy + H, ox:ox + W]
    if padding == "same":
        return out
    if 2 * ry >= H or 2 * rx >= W:
        raise ValueError(f"dilated kernel extent {(2 * ry + 1, 2 * rx + 1)} exceeds input {F.shape}")
    return out[ry:H - ry, rx:W - rx]


def gridding_index(g, rate: int) -> float:
    """Share of a grid's variance explained by its ``rate x rate`` residue classes.

    Cells are grouped by ``(x mod rate, y mod rate)``; the index is the
    size-weighted variance of the class means over the total variance. A
    checkerboard at the dilation period scores 1, a constant grid 0.
    """
    a = _as_array(g)
    if rate < 1:
        raise ValueError(f"rate must be >= 1, got {rate}")
    if a.shape[0] <= rate or a.shape[1] <= rate:
        raise ValueError(f"grid {a.shape} must exceed rate {rate} in both dimensions")
    if np.ptp(a) == 0:
        return 0.0
    mean = a.mean()
    total = np.mean((a - mean) ** 2)
    between = 0.0
    for oy in range(rate):
        for ox in range(rate):
            cls = a[oy::rate, ox::rate]
            between += cls.size * (cls.mean() - mean) ** 2
    between /= a.size
    return float(between / (total + GRIDDING_EPS))


def conv_cascade(F, k, rates: Sequence[int]) -> np.ndarray:
    out = _as_array(F)
    for r in rates:
        out = dilated_conv2d(out, k, r, "same")
    return out


@dataclass(frozen=True)
class AttentionGateParams:
    W_x: np.ndarray
    W_g: np.ndarray
    b_xg: np.ndarray
    psi: np.ndarray
    b_psi: float

    def __post_init__(self):
        for name in ("W_x", "W_g", "b_xg", "psi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "b_psi", float(self.b_psi))
        d_int = self.b_xg.shape[0] if self.b_xg.ndim == 1 else -1
        if (
            self.W_x.ndim != 2
            or self.W_g.ndim != 2
            or d_int < 0
            or self.W_x.shape[1] != d_int
            or self.W_g.shape[1] != d_int
            or self.psi.shape != (d_int,)
        ):
            raise ValueError(
                f"inconsistent gate shapes: W_x {self.W_x.shape}, W_g {self.W_g.shape}, "
                f"b_xg {self.b_xg.shape}, psi {self.psi.shape}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W_x.shape[0], self.W_g.shape[0], self.b_xg.shape[0]

    @classmethod
    def zeros(cls, d_x: int, d_g: int, d_int: int) -> "AttentionGateParams":
        return cls(np.zeros((d_x, d_int)), np.zeros((d_g, d_int)), np.zeros(d_int), np.zeros(d_int), 0.0)

    @classmethod
    def random(cls, d_x: int, d_g: int, d_int: int, rng: np.random.Generator, scale: float = 1.0):
        return cls(
            rng.normal(0, scale, (d_x, d_int)),
            rng.normal(0, scale, (d_g, d_int)),
            rng.normal(0, scale, d_int),
            rng.normal(0, scale, d_int),
            float(rng.normal(0, scale)),
        )


def _check_inputs(x, g, theta: AttentionGateParams):
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    d_x, d_g, _ = theta.dims
    if x.shape != (d_x,) or g.shape != (d_g,):
        raise ValueError(f"expected x of shape ({d_x},) and g of shape ({d_g},), got {x.shape} and {g.shape}")
    return x, g


def _sigmoid(q: float) -> float:
    if q >= 0:
        return 1.0 / (1.0 + math.exp(-q))
    e = math.exp(q)
    return e / (1.0 + e)


def attention_gate_forward(x, g, theta: AttentionGateParams) -> tuple[float, np.ndarray]:
    """Additive attention: ``alpha = sigmoid(psi . relu(W_x^T x + W_g^T g + b_xg) + b_psi)``.

    Returns ``alpha`` and the gated feature ``alpha * x``.
    """
    x, g = _check_inputs(x, g, theta)
    pre = theta.W_x.T @ x + theta.W_g.T @ g + theta.b_xg
    q = float(theta.psi @ np.maximum(pre, 0.0)) + theta.b_psi
    alpha = _sigmoid(q)
    return alpha, alpha * x


@dataclass(frozen=True)
class AttentionGateGrads:
    x: np.ndarray
    g: np.ndarray
    W_x: np.ndarray
    W_g: np.ndarray
    b_xg: np.ndarray
    psi: np.ndarray
    b_psi: float


def attention_gate_grad(x, g, theta: AttentionGateParams, upstream: float = 1.0, gated_upstream=None) -> AttentionGateGrads:
    """Analytic gradients of ``upstream * alpha`` (plus ``gated_upstream . gated_x`` if given).

    The rectifier's subgradient at 0 is taken as 0.
    """
    x, g = _check_inputs(x, g, theta)
    pre = theta.W_x.T @ x + theta.W_g.T @ g + theta.b_xg
    h = np.maximum(pre, 0.0)
    alpha = _sigmoid(float(theta.psi @ h) + theta.b_psi)

    direct = np.zeros_like(x)
    dalpha = float(upstream)
    if gated_upstream is not None:
        gu = np.asarray(gated_upstream, dtype=float)
        if gu.shape != x.shape:
            raise ValueError(f"gated_upstream must have shape {x.shape}, got {gu.shape}")
        dalpha += float(gu @ x)
        direct = alpha * gu

    dq = dalpha * alpha * (1.0 - alpha)
    dpre = dq * theta.psi * (pre > 0)
    return AttentionGateGrads(
        x=theta.W_x @ dpre + direct,
        g=theta.W_g @ dpre,
        W_x=np.outer(x, dpre),
        W_g=np.outer(g, dpre),
        b_xg=dpre,
        psi=dq * h,
        b_psi=dq,
    )


def attention_gate_map(X, G, theta: AttentionGateParams) -> tuple[np.ndarray, np.ndarray]:
    """Apply the gate independently at every position of ``(H, W, d)`` feature maps."""
    X = np.asarray(X, dtype=float)
    G = np.asarray(G, dtype=float)
    if X.shape[:2] != G.shape[:2]:
        raise ValueError(f"feature map {X.shape[:2]} and gate signal {G.shape[:2]} differ in resolution")
    alpha = np.empty(X.shape[:2])
    gated = np.empty_like(X)
    for i in range(X.shape[0]):
        for j in range(X.shape[1]):
            alpha[i, j], gated[i, j] = attention_gate_forward(X[i, j], G[i, j], theta)
    return alpha, gated


def focal_loss(p: float, y: int, alpha_w: float = 0.25, gamma: float = 2.0) -> float:
    """Binary focal loss ``-alpha_t * (1 - p_t)**gamma * log(p_t)``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie strictly inside (0, 1), got {p}")
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    if not 0.0 <= alpha_w <= 1.0 or gamma < 0:
        raise ValueError(f"need alpha_w in [0, 1] and gamma >= 0, got {alpha_w}, {gamma}")
    p_t = p if y == 1 else 1.0 - p
    a_t = alpha_w if y == 1 else 1.0 - alpha_w
    return -a_t * (1.0 - p_t) ** gamma * math.log(p_t)


def smooth_l1(pred, target, beta: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    d = np.abs(pred - target)
    return float(np.sum(np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)))
