"""Quality metrics and analytic cost accounting.

Counting conventions (fixed so reports are comparable across backends):
1 multiply-accumulate = 2 FLOPs, and one real 2-D FFT of n points costs
2.5 * n * log2(n) FLOPs. Frequency-domain pointwise complex products are
charged at 6 FLOPs per bin (3 MAC equivalents) over the half-spectrum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .core import Image
from .filtering import next_fast_len_235

PSNR_SENTINEL = 99.0

BACKENDS = ("direct", "factored", "fourier")


def _plane(a) -> np.ndarray:
    return a.data if isinstance(a, Image) else np.asarray(a)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1]-scaled intensities.

    Identical inputs (and any MSE small enough to exceed the cap) report
    the sentinel value 99.0.
    """
    x = _plane(a).astype(np.float64, copy=False)
    y = _plane(b).astype(np.float64, copy=False)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(10.0 * math.log10(1.0 / mse), PSNR_SENTINEL)


def loss_terms(pred, truth) -> tuple[float, float]:
    """(mean squared intensity error, mean absolute gradient error).

    Gradients are forward differences along x and y, zero at the last
    column/row; the gradient term averages over both directions.
    """
    p = _plane(pred).astype(np.float64, copy=False)
    t = _plane(truth).astype(np.float64, copy=False)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    l2 = float(np.mean((p - t) ** 2))
    diff = p - t
    gx = np.zeros_like(diff)
    gy = np.zeros_like(diff)
    gx[:, :-1] = diff[:, 1:] - diff[:, :-1]
    gy[:-1, :] = diff[1:, :] - diff[:-1, :]
    l1 = float((np.abs(gx).sum() + np.abs(gy).sum()) / (2 * diff.size))
    return l2, l1


def prediction_count(H: int, W: int, K: int, T: int, B: int | None = None, mode: str = "kpn", C: int = 1) -> int:
    """Outputs a kernel predictor must emit for an H x W image.

    ``kpn`` predicts a full field: W*H*K^2*T (times C for per-channel
    kernels). ``basis`` predicts per-pixel coefficients plus a global
    basis: W*H*B + K^2*T*B (kernel term times C in color mode). Python
    integers, so no overflow.
    """
    if min(H, W, K, T, C) < 1:
        raise ValueError("dimensions must be positive")
    if mode == "kpn":
        return W * H * K * K * T * C
    if mode == "basis":
        if B is None or B < 1:
            raise ValueError("basis mode needs B >= 1")
        return W * H * B + K * K * T * B * C
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class FlopReport:
    """Analytic cost breakdown for one filtering backend."""

    backend: str
    H: int
    W: int
    K: int
    T: int
    B: int
    C: int
    prediction_count: int
    filter_macs: int
    fft_flops: float
    mixing_macs: int
    total_flops: float

    def to_dict(self) -> dict:
        return asdict(self)


def flop_report(H: int, W: int, K: int, T: int, B: int, C: int, backend: str) -> FlopReport:
    """Cost model for filtering an H x W x C burst of T frames.

    direct:   one MAC per field weight, H*W*K^2*T*C.
    factored: H*W*K^2*T*B*C convolution MACs plus H*W*B*C mixing MACs.
    fourier:  (T*C + B*T*C + B*C) real transforms of the padded grid,
              pointwise complex products over the half-spectrum (6 FLOPs
              per bin, carried in filter_macs at 3 MACs each), plus the
              same mixing MACs as factored.

    The total is always 2 * (filter_macs + mixing_macs) + fft_flops.
    """
    if min(H, W, K, T, B, C) < 1:
        raise ValueError("dimensions must be positive")
    if backend == "direct":
        filter_macs = H * W * K * K * T * C
        mixing = 0
        fft = 0.0
        pred = prediction_count(H, W, K, T, mode="kpn", C=C)
    elif backend == "factored":
        filter_macs = H * W * K * K * T * B * C
        mixing = H * W * B * C
        fft = 0.0
        pred = prediction_count(H, W, K, T, B, mode="basis", C=C)
    elif backend == "fourier":
        hp = next_fast_len_235(H + K - 1)
        wp = next_fast_len_235(W + K - 1)
        n = hp * wp
        transforms = T * C + B * T * C + B * C
        fft = transforms * 2.5 * n * math.log2(n)
        bins = hp * (wp // 2 + 1)
        filter_macs = 3 * bins * B * T * C
        mixing = H * W * B * C
        pred = prediction_count(H, W, K, T, B, mode="basis", C=C)
    else:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    total = 2 * (filter_macs + mixing) + fft
    return FlopReport(
        backend=backend,
        H=H,
        W=W,
        K=K,
        T=T,
        B=B,
        C=C,
        prediction_count=pred,
        filter_macs=filter_macs,
        fft_flops=fft,
        mixing_macs=mixing,
        total_flops=total,
    )
