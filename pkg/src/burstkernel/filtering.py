"""Kernel filtering backends: direct, factored, and Fourier.

All three compute the same quantity,

    out[n] = sum_t sum_delta w_n[delta, t] * I[n - delta, t],

differing only in how the sum is organized. Out-of-bounds samples are
always zero (zero-padding), and ``I[n - delta]`` is true convolution
indexing, so no kernel flip is inserted anywhere. The factored and
Fourier backends take the kernel basis and per-pixel coefficients
instead of an explicit per-pixel field.

Kernel arrays store the offset ``delta = a - (K - 1) // 2`` at array
index ``a`` (see core module docs).
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as _fft

from .core import Burst, CoefficientField, Image, KernelBasis, KernelField

# row-block budget (elements) for materialized sliding windows
_WINDOW_BLOCK_ELEMS = 1 << 22


def next_fast_len_235(n: int) -> int:
    """Smallest integer >= n whose prime factors are all in {2, 3, 5}."""
    if n < 1:
        raise ValueError("length must be positive")
    m = n
    while True:
        k = m
        for f in (2, 3, 5):
            while k % f == 0:
                k //= f
        if k == 1:
            return m
        m += 1


class PlanCache:
    """Per-length FFT size plans, shared across calls.

    Maps a required transform length to the padded 5-smooth length used
    for it. Reads are lock-free; insertion takes a lock, so the cache is
    safe for concurrent readers with exclusive insertion. Plans carry no
    data, so results never depend on cache state.
    """

    def __init__(self):
        self._sizes: dict[int, int] = {}
        self._lock = threading.Lock()

    def fast_len(self, n: int) -> int:
        got = self._sizes.get(n)
        if got is not None:
            return got
        val = next_fast_len_235(n)
        if val > 1 << 30:
            raise ValueError(f"FFT size {val} overflows the supported range")
        with self._lock:
            self._sizes.setdefault(n, val)
        return self._sizes[n]

    def __len__(self) -> int:
        return len(self._sizes)


_DEFAULT_PLAN_CACHE = PlanCache()


def _resolve_dtype(dtype, *arrays) -> np.dtype:
    if dtype is not None:
        dt = np.dtype(dtype)
        if dt not in (np.float32, np.float64):
            raise ValueError("dtype must be float32 or float64")
        return dt
    dt = np.result_type(*[a.dtype for a in arrays])
    return np.dtype(np.float64) if dt == np.float64 else np.dtype(np.float32)


def _padded_burst(frames: np.ndarray, radius: int, dtype) -> np.ndarray:
    t, h, w, c = frames.shape
    out = np.zeros((t, h + 2 * radius, w + 2 * radius, c), dtype=dtype)
    out[:, radius : radius + h, radius : radius + w, :] = frames
    return out


def _check_field_matches(burst: Burst, kfield: KernelField):
    if (kfield.height, kfield.width) != (burst.height, burst.width):
        raise ValueError(
            f"field {kfield.height}x{kfield.width} does not match burst "
            f"{burst.height}x{burst.width}"
        )
    if kfield.T != burst.T:
        raise ValueError(f"field has T={kfield.T} but burst has T={burst.T}")
    if kfield.C not in (1, burst.channels):
        raise ValueError(f"field channel groups {kfield.C} incompatible with {burst.channels}-channel burst")


def filter_direct(noisy: Burst, kfield: KernelField, dtype=None) -> Image:
    """Apply per-pixel kernels to the burst.

    A field with a single channel group is shared across image channels;
    a C-group field applies one kernel per channel.
    """
    _check_field_matches(noisy, kfield)
    dt = _resolve_dtype(dtype, kfield.weights, *[f.data for f in noisy.frames])
    w = kfield.weights.astype(dt, copy=False)
    frames = noisy.stacked(dt)
    k = kfield.K
    r = (k - 1) // 2
    h, wd, c = noisy.height, noisy.width, noisy.channels
    padded = _padded_burst(frames, r, dt)
    out = np.zeros((h, wd, c), dtype=dt)
    shared = kfield.C == 1 and c > 1
    for ai in range(k):
        for aj in range(k):
            sl = padded[:, k - 1 - ai : k - 1 - ai + h, k - 1 - aj : k - 1 - aj + wd, :]
            taps = w[:, :, ai, aj, :, :]
            if shared:
                out += np.einsum("tyxc,yxt->yxc", sl, taps[:, :, :, 0])
            else:
                out += np.einsum("tyxc,yxtc->yxc", sl, taps)
    return Image(out)


def per_frame_estimates(noisy: Burst, kfield: KernelField, dtype=None) -> list[Image]:
    """Denoised estimate from each frame alone, scaled by T.

    Estimate t applies only the frame-t slice of each kernel, scaled so
    that the mean over t reproduces the full filtered output.
    """
    _check_field_matches(noisy, kfield)
    dt = _resolve_dtype(dtype, kfield.weights, *[f.data for f in noisy.frames])
    w = kfield.weights.astype(dt, copy=False)
    frames = noisy.stacked(dt)
    k = kfield.K
    r = (k - 1) // 2
    h, wd, c = noisy.height, noisy.width, noisy.channels
    t_count = noisy.T
    padded = _padded_burst(frames, r, dt)
    shared = kfield.C == 1 and c > 1
    scale = dt.type(t_count)
    estimates = []
    for t in range(t_count):
        acc = np.zeros((h, wd, c), dtype=dt)
        for ai in range(k):
            for aj in range(k):
                sl = padded[t, k - 1 - ai : k - 1 - ai + h, k - 1 - aj : k - 1 - aj + wd, :]
                taps = w[:, :, ai, aj, t, :]
                if shared:
                    acc += sl * taps[:, :, :1]
                else:
                    acc += sl * taps
        estimates.append(Image(acc * scale))
    return estimates


# ---------------------------------------------------------------------------
# Spatial convolution with uniform kernels (factored path)
# ---------------------------------------------------------------------------


def _conv_same_batched(plane: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' true convolution of one plane with M kernels.

    plane: (H, W); kernels: (K, K, M). Returns (H, W, M). Organized as a
    sliding-window matmul so all M kernels ride one pass over the plane;
    rows are processed in blocks to bound the materialized window size.
    """
    k = kernels.shape[0]
    r = (k - 1) // 2
    h, w = plane.shape
    dt = plane.dtype
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=dt)
    padded[r : r + h, r : r + w] = plane
    # true convolution == correlation with the flipped kernel
    flipped = np.ascontiguousarray(kernels[::-1, ::-1, :].reshape(k * k, -1))
    out = np.empty((h, w, kernels.shape[2]), dtype=dt)
    block = max(1, _WINDOW_BLOCK_ELEMS // max(1, w * k * k))
    for y0 in range(0, h, block):
        y1 = min(h, y0 + block)
        win = sliding_window_view(padded[y0 : y1 + 2 * r, :], (k, k))
        rows = y1 - y0
        flat = np.ascontiguousarray(win).reshape(rows * w, k * k)
        out[y0:y1] = (flat @ flipped).reshape(rows, w, -1)
    return out


def conv2d_uniform(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve one image plane with a single K x K kernel.

    True convolution with zero padding and same-size output:
    ``out[n] = sum_delta kernel[delta] * plane[n - delta]``.
    """
    plane = np.asarray(plane)
    kernel = np.asarray(kernel)
    if plane.ndim != 2 or kernel.ndim != 2:
        raise ValueError("conv2d_uniform expects 2-D plane and kernel")
    if kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ValueError("kernel must be square with odd side")
    dt = np.result_type(plane.dtype, kernel.dtype)
    return _conv_same_batched(plane.astype(dt, copy=False), kernel.astype(dt, copy=False)[:, :, None])[:, :, 0]


def _check_basis_coeffs(burst: Burst, basis: KernelBasis, coeffs: CoefficientField):
    if basis.B != coeffs.B:
        raise ValueError(f"basis B={basis.B} does not match coefficients B={coeffs.B}")
    if basis.T != burst.T:
        raise ValueError(f"basis has T={basis.T} but burst has T={burst.T}")
    if basis.C not in (1, burst.channels):
        raise ValueError(f"basis channel groups {basis.C} incompatible with {burst.channels}-channel burst")
    if (coeffs.height, coeffs.width) != (burst.height, burst.width):
        raise ValueError(
            f"coefficients {coeffs.height}x{coeffs.width} do not match burst "
            f"{burst.height}x{burst.width}"
        )


def filter_factored(noisy: Burst, basis: KernelBasis, coeffs: CoefficientField, dtype=None) -> Image:
    """Filter via per-basis spatial convolutions plus per-pixel mixing.

    Convolves every frame with every basis slice (a spatially-uniform
    kernel), then mixes the filtered stacks with the per-pixel
    coefficients. Equivalent to filter_direct on the reconstructed field.
    """
    _check_basis_coeffs(noisy, basis, coeffs)
    dt = _resolve_dtype(dtype, basis.elements, coeffs.coeffs, *[f.data for f in noisy.frames])
    frames = noisy.stacked(dt)
    v = basis.elements.astype(dt, copy=False)
    cf = coeffs.coeffs.astype(dt, copy=False)
    h, w, c = noisy.height, noisy.width, noisy.channels
    out = np.zeros((h, w, c), dtype=dt)
    for t in range(noisy.T):
        for ci in range(c):
            cw = 0 if basis.C == 1 else ci
            filtered = _conv_same_batched(frames[t, :, :, ci], v[:, :, t, cw, :])
            out[:, :, ci] += np.einsum("yxb,yxb->yx", cf, filtered)
    return Image(out)


# ---------------------------------------------------------------------------
# Fourier backend
# ---------------------------------------------------------------------------


def _fourier_patch(frames, basis_elems, coeffs, oy, ox, out_h, out_w, plan_cache, workers):
    """Fourier-filter one zero-padded patch.

    frames: (T, Hin, Win, C) already in the working dtype. Output pixel
    (y, x) corresponds to same-centered convolution at input coordinate
    (y + oy, x + ox). Forward frame transforms are computed once and
    reused for every basis element.
    """
    t_count, h_in, w_in, c = frames.shape
    k = basis_elems.shape[0]
    cw_count = basis_elems.shape[3]
    b_count = basis_elems.shape[4]
    r = (k - 1) // 2
    dt = frames.dtype
    hp = plan_cache.fast_len(h_in + k - 1)
    wp = plan_cache.fast_len(w_in + k - 1)
    # (T, C, Hp, Wf) forward transforms of the zero-padded frames
    spec_frames = _fft.rfft2(np.moveaxis(frames, 3, 1), s=(hp, wp), workers=workers)
    kern_pad = np.zeros((t_count, cw_count, hp, wp), dtype=dt)
    out = np.zeros((out_h, out_w, c), dtype=dt)
    y0, x0 = oy + r, ox + r
    for b in range(b_count):
        kern_pad[:, :, :k, :k] = np.moveaxis(basis_elems[:, :, :, :, b], (2, 3), (0, 1))
        spec_kern = _fft.rfft2(kern_pad, workers=workers)
        acc = (spec_frames * spec_kern).sum(axis=0)
        filtered = _fft.irfft2(acc, s=(hp, wp), workers=workers)
        crop = filtered[:, y0 : y0 + out_h, x0 : x0 + out_w]
        out += coeffs[:, :, b, None] * np.moveaxis(crop, 0, 2)
    return out


def filter_fourier(
    noisy: Burst,
    basis: KernelBasis,
    coeffs: CoefficientField,
    plan_cache: PlanCache | None = None,
    dtype=None,
    tile: int = 0,
    workers=None,
) -> Image:
    """Filter via FFT convolutions plus per-pixel mixing.

    Each frame is transformed once on a zero-padded 5-smooth grid; basis
    spectra multiply and accumulate over frames, and one inverse
    transform per basis element (and channel group) returns to the
    spatial domain before coefficient mixing.

    With ``tile > 0`` the image is processed in ``tile x tile`` output
    blocks whose inputs overlap by (K-1)/2, and the valid interiors are
    stitched; tiled and untiled outputs agree to FFT round-off.
    """
    _check_basis_coeffs(noisy, basis, coeffs)
    if plan_cache is None:
        plan_cache = _DEFAULT_PLAN_CACHE
    dt = _resolve_dtype(dtype, basis.elements, coeffs.coeffs, *[f.data for f in noisy.frames])
    frames = noisy.stacked(dt)
    v = basis.elements.astype(dt, copy=False)
    cf = coeffs.coeffs.astype(dt, copy=False)
    h, w, c = noisy.height, noisy.width, noisy.channels
    k = basis.K
    r = (k - 1) // 2
    if tile == 0:
        out = _fourier_patch(frames, v, cf, 0, 0, h, w, plan_cache, workers)
        return Image(out)
    if tile < 1:
        raise ValueError("tile must be 0 (full frame) or a positive tile size")
    out = np.empty((h, w, c), dtype=dt)
    for ty in range(0, h, tile):
        th = min(tile, h - ty)
        for tx in range(0, w, tile):
            tw = min(tile, w - tx)
            ext = np.zeros((noisy.T, th + 2 * r, tw + 2 * r, c), dtype=dt)
            sy0, sy1 = max(0, ty - r), min(h, ty + th + r)
            sx0, sx1 = max(0, tx - r), min(w, tx + tw + r)
            ext[:, sy0 - (ty - r) : sy1 - (ty - r), sx0 - (tx - r) : sx1 - (tx - r), :] = frames[
                :, sy0:sy1, sx0:sx1, :
            ]
            block = _fourier_patch(
                ext, v, cf[ty : ty + th, tx : tx + tw, :], r, r, th, tw, plan_cache, workers
            )
            out[ty : ty + th, tx : tx + tw, :] = block
    return Image(out)
