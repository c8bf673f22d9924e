"""Independent reference computations and the kernel self-check suite.

References here avoid the code paths they check: dilated convolution is
compared with scipy's plain convolution of a zero-inserted kernel, gate
gradients with central finite differences, the gate forward pass with
explicit scalar loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import convolve2d

from detkit.kernels import (
    AttentionGateParams,
    attention_gate_forward,
    attention_gate_grad,
    conv_cascade,
    dilated_conv2d,
    focal_loss,
    gridding_index,
    receptive_field,
    smooth_l1,
)

FD_STEP = 1e-5
FD_REL_TOL = 1e-5
KINK_MARGIN = 1e-3


def zero_inserted_kernel(k: np.ndarray, rate: int) -> np.ndarray:
    kh, kw = k.shape
    out = np.zeros(((kh - 1) * rate + 1, (kw - 1) * rate + 1))
    out[::rate, ::rate] = k
    return out


def reference_dilated_conv(F: np.ndarray, k: np.ndarray, rate: int, padding: str) -> np.ndarray:
    return convolve2d(F, zero_inserted_kernel(k, rate), mode=padding)


def nonzero_extent(kernel: np.ndarray) -> int:
    rows = np.flatnonzero(kernel.any(axis=1))
    return int(rows[-1] - rows[0] + 1)


def reference_gate_alpha(x, g, theta: AttentionGateParams) -> float:
    d_x, d_g, d_int = theta.dims
    q = theta.b_psi
    for j in range(d_int):
        s = theta.b_xg[j]
        for i in range(d_x):
            s += theta.W_x[i, j] * x[i]
        for i in range(d_g):
            s += theta.W_g[i, j] * g[i]
        if s > 0:
            q += theta.psi[j] * s
    return 1.0 / (1.0 + math.exp(-q))


def _gate_flat(theta: AttentionGateParams, x, g) -> dict[str, np.ndarray]:
    return {
        "x": np.array(x, dtype=float),
        "g": np.array(g, dtype=float),
        "W_x": theta.W_x.copy(),
        "W_g": theta.W_g.copy(),
        "b_xg": theta.b_xg.copy(),
        "psi": theta.psi.copy(),
        "b_psi": np.array([theta.b_psi]),
    }


def _gate_alpha(parts: dict[str, np.ndarray]) -> float:
    theta = AttentionGateParams(parts["W_x"], parts["W_g"], parts["b_xg"], parts["psi"], parts["b_psi"][0])
    return attention_gate_forward(parts["x"], parts["g"], theta)[0]


def finite_difference_gate_grads(x, g, theta: AttentionGateParams, step: float = FD_STEP) -> dict[str, np.ndarray]:
    """Central differences of alpha w.r.t. every input and parameter."""
    base = _gate_flat(theta, x, g)
    grads = {}
    for name, arr in base.items():
        grad = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            grad[idx] = (_gate_alpha(plus) - _gate_alpha(minus)) / (2 * step)
        grads[name] = grad
    return grads


def gate_pre_activation(x, g, theta: AttentionGateParams) -> np.ndarray:
    return theta.W_x.T @ np.asarray(x) + theta.W_g.T @ np.asarray(g) + theta.b_xg


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.atleast_1d(np.asarray(analytic, dtype=float))
    numeric = np.atleast_1d(np.asarray(numeric, dtype=float))
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / scale))


def draw_gate_case(rng: np.random.Generator, max_dim: int = 8):
    """Random gate instance whose rectifier inputs all sit away from 0."""
    while True:
        d_x, d_g, d_int = (int(v) for v in rng.integers(1, max_dim + 1, 3))
        theta = AttentionGateParams.random(d_x, d_g, d_int, rng, scale=0.5)
        x = rng.normal(size=d_x)
        g = rng.normal(size=d_g)
        if np.min(np.abs(gate_pre_activation(x, g, theta))) > KINK_MARGIN:
            return x, g, theta


def gate_gradient_error(x, g, theta: AttentionGateParams) -> float:
    analytic = attention_gate_grad(x, g, theta)
    numeric = finite_difference_gate_grads(x, g, theta)
    return max(max_relative_error(getattr(analytic, name), numeric[name]) for name in numeric)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check_dilated_oracle(rng, trials: int) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        rate = int(rng.integers(1, 5))
        side = int(rng.choice([3, 5]))
        ext = (side - 1) * rate + 1
        h, w = (int(v) for v in rng.integers(1, 17, 2))
        F = rng.normal(size=(h, w))
        k = rng.normal(size=(side, side))
        modes = ["same"] + (["valid"] if ext <= min(h, w) else [])
        for mode in modes:
            diff = np.max(np.abs(dilated_conv2d(F, k, rate, mode) - reference_dilated_conv(F, k, rate, mode)))
            worst = max(worst, float(diff))
    return CheckResult("dilated_conv2d == zero-inserted standard convolution", worst <= 1e-12, f"max abs diff {worst:.3e}")


def _check_linearity(rng, trials: int) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        F1, F2 = rng.normal(size=(2, 12, 10))
        k = rng.normal(size=(3, 3))
        a, b = rng.normal(size=2)
        rate = int(rng.integers(1, 4))
        lhs = dilated_conv2d(a * F1 + b * F2, k, rate)
        rhs = a * dilated_conv2d(F1, k, rate) + b * dilated_conv2d(F2, k, rate)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return CheckResult("dilated_conv2d is linear in the input", worst <= 1e-12, f"max abs diff {worst:.3e}")


def _check_identity_kernel(rng, trials: int) -> CheckResult:
    ok = True
    for _ in range(trials):
        F = rng.normal(size=(9, 7))
        delta = np.zeros((3, 3))
        delta[1, 1] = 1.0
        ok &= bool(np.array_equal(dilated_conv2d(F, delta, int(rng.integers(1, 5))), F))
    return CheckResult("delta kernel is the identity", ok, "")


def _check_receptive_field(rng, trials: int) -> CheckResult:
    ok = receptive_field(3, 2) == 5
    prev = 0
    for rate in range(1, 9):
        rf = receptive_field(3, rate)
        ok &= rf > prev and rf == nonzero_extent(zero_inserted_kernel(np.ones((3, 3)), rate))
        prev = rf
    return CheckResult("receptive field (3,2) = 5, increasing, equals zero-inserted extent", ok, "")


def _check_gridding(rng, trials: int) -> CheckResult:
    checker = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
    const = np.full((6, 6), 3.7)
    impulse = np.zeros((33, 33))
    impulse[16, 16] = 1.0
    ones = np.ones((3, 3))
    gridded = gridding_index(conv_cascade(impulse, ones, [2, 2]), 2)
    degridded = gridding_index(conv_cascade(impulse, ones, [2, 1]), 2)
    shift = rng.normal(size=(10, 10))
    ok = (
        abs(gridding_index(checker, 2) - 1.0) < 1e-9
        and gridding_index(const, 2) == 0.0
        and gridded > degridded
        and abs(gridding_index(shift, 2) - gridding_index(shift + 5.0, 2)) < 1e-9
    )
    return CheckResult(
        "gridding index: checkerboard 1, constant 0, rates [2,2] > [2,1]",
        ok,
        f"[2,2]={gridded:.4f} [2,1]={degridded:.4f}",
    )


def _check_gate_forward(rng, trials: int) -> CheckResult:
    worst = 0.0
    ok = True
    for _ in range(trials):
        theta = AttentionGateParams.random(4, 4, 3, rng)
        x, g = rng.normal(size=(2, 4))
        alpha, gated = attention_gate_forward(x, g, theta)
        worst = max(worst, abs(alpha - reference_gate_alpha(x, g, theta)))
        ok &= 0.0 < alpha < 1.0 and bool(np.array_equal(gated, alpha * x))
    return CheckResult("attention gate forward == scalar-loop reference", ok and worst <= 1e-12, f"max abs diff {worst:.3e}")


def _check_gate_grad(rng, trials: int) -> CheckResult:
    worst = max(gate_gradient_error(*draw_gate_case(rng)) for _ in range(trials))
    return CheckResult("attention gate gradients == central finite differences", worst < FD_REL_TOL, f"max rel err {worst:.3e}")


def _check_losses(rng, trials: int) -> CheckResult:
    ok = abs(focal_loss(0.1, 1, 0.25, 2.0) - (-0.25 * 0.81 * math.log(0.1))) < 1e-12
    for _ in range(trials):
        p = float(rng.uniform(0.01, 0.99))
        y = int(rng.integers(0, 2))
        p_t = p if y else 1 - p
        ok &= abs(focal_loss(p, y, 1.0 if y else 0.0, 0.0) - (-math.log(p_t))) < 1e-12
        a_t = 0.25 if y else 0.75
        ok &= focal_loss(p, y, 0.25, float(rng.uniform(0, 5))) <= a_t * -math.log(p_t) + 1e-15
    beta = 1.0
    eps = 1e-7
    left, right = smooth_l1([beta - eps], [0.0], beta), smooth_l1([beta + eps], [0.0], beta)
    ok &= abs(right - left) < 1e-6 and abs(smooth_l1([2, 0, 0, 0], [0, 0, 0, 0], 1.0) - 1.5) < 1e-12
    return CheckResult("focal loss and smooth L1 formulas", ok, "")


CHECKS: list[tuple[Callable, int]] = [
    (_check_dilated_oracle, 200),
    (_check_linearity, 50),
    (_check_identity_kernel, 20),
    (_check_receptive_field, 1),
    (_check_gridding, 1),
    (_check_gate_forward, 100),
    (_check_gate_grad, 40),
    (_check_losses, 200),
]


def run_kernel_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [fn(rng, trials) for fn, trials in CHECKS]
