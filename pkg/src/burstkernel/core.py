"""Shared domain types, normalization, validation, and serialization.

Array layout conventions used throughout the package:

* image data            -> ``(H, W, C)``
* kernel field weights  -> ``(H, W, K, K, T, C)``  axes ``(n_y, n_x, dy, dx, t, c)``
* kernel basis elements -> ``(K, K, T, C, B)``     axes ``(dy, dx, t, c, b)``
* mixing coefficients   -> ``(H, W, B)``

Kernel offsets are centered: array index ``a`` along a kernel axis maps to
the spatial offset ``delta = a - (K - 1) // 2``, which requires odd K.

All types are plain immutable values; nothing mutates them after
construction, so they are safe to share between concurrent workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image as _PILImage

KERNEL_SUM_TOL = 1e-5

TENSOR_MAGIC = b"BKT1"


class TensorFormatError(Exception):
    """Raised when a tensor container is malformed or cannot be written."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


def _as_float_array(data, name: str) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Image:
    """Single intensity grid of shape (H, W, C) with nominal range [0, 1].

    Values outside the nominal range are permitted (e.g. after noise
    injection); only finiteness is enforced.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.data, "Image.data")
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"Image.data must be (H, W) or (H, W, C), got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class NoiseParams:
    """Read/shot noise standard deviations in intensity units."""

    sigma_r: float
    sigma_s: float

    def __post_init__(self):
        if self.sigma_r < 0 or self.sigma_s < 0:
            raise ValueError("noise standard deviations must be nonnegative")

    def variance(self, x: np.ndarray) -> np.ndarray:
        """Signal-dependent variance sigma_r^2 + sigma_s^2 * max(x, 0)."""
        return self.sigma_r**2 + self.sigma_s**2 * np.maximum(x, 0.0)


@dataclass(frozen=True)
class Burst:
    """Ordered sequence of T same-size frames; frame 0 is the reference."""

    frames: tuple
    noise: NoiseParams | None = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 1:
            raise ValueError("a burst needs at least one frame")
        h, w, c = frames[0].height, frames[0].width, frames[0].channels
        for f in frames[1:]:
            if (f.height, f.width, f.channels) != (h, w, c):
                raise ValueError("all burst frames must share height/width/channels")
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def channels(self) -> int:
        return self.frames[0].channels

    @property
    def reference(self) -> Image:
        return self.frames[0]

    def stacked(self, dtype=None) -> np.ndarray:
        """Frames as one (T, H, W, C) array."""
        out = np.stack([f.data for f in self.frames])
        return out if dtype is None else out.astype(dtype, copy=False)


def _check_kernel_side(k: int):
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel side must be odd and positive, got {k}")


@dataclass(frozen=True)
class KernelField:
    """Per-pixel averaging weights of shape (H, W, K, K, T, C).

    ``normalized`` marks fields built by a softmax path (nonnegative,
    per-pixel sums of 1); unconstrained fields (e.g. from SVD compression)
    carry ``normalized=False``.
    """

    weights: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.weights)
        if arr.ndim != 6:
            raise ValueError(f"KernelField.weights must be 6-D, got shape {arr.shape}")
        if arr.shape[2] != arr.shape[3]:
            raise ValueError("kernel window must be square")
        _check_kernel_side(arr.shape[2])
        object.__setattr__(self, "weights", arr)

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @property
    def K(self) -> int:
        return self.weights.shape[2]

    @property
    def T(self) -> int:
        return self.weights.shape[4]

    @property
    def C(self) -> int:
        return self.weights.shape[5]


@dataclass(frozen=True)
class KernelBasis:
    """B global 3-D (or 4-D for color) kernels of shape (K, K, T, C, B)."""

    elements: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.elements)
        if arr.ndim != 5:
            raise ValueError(f"KernelBasis.elements must be 5-D, got shape {arr.shape}")
        if arr.shape[0] != arr.shape[1]:
            raise ValueError("kernel window must be square")
        _check_kernel_side(arr.shape[0])
        object.__setattr__(self, "elements", arr)

    @property
    def K(self) -> int:
        return self.elements.shape[0]

    @property
    def T(self) -> int:
        return self.elements.shape[2]

    @property
    def C(self) -> int:
        return self.elements.shape[3]

    @property
    def B(self) -> int:
        return self.elements.shape[4]

    def as_matrix(self) -> np.ndarray:
        """Basis as a (B, K*K*T*C) matrix, one element per row."""
        k, _, t, c, b = self.elements.shape
        return np.moveaxis(self.elements, -1, 0).reshape(b, k * k * t * c)


@dataclass(frozen=True)
class CoefficientField:
    """Per-pixel mixing vectors of shape (H, W, B)."""

    coeffs: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.coeffs)
        if arr.ndim != 3:
            raise ValueError(f"CoefficientField.coeffs must be 3-D, got shape {arr.shape}")
        object.__setattr__(self, "coeffs", arr)

    @property
    def height(self) -> int:
        return self.coeffs.shape[0]

    @property
    def width(self) -> int:
        return self.coeffs.shape[1]

    @property
    def B(self) -> int:
        return self.coeffs.shape[2]


# ---------------------------------------------------------------------------
# Normalization and validation
# ---------------------------------------------------------------------------


def softmax_normalize(values, axis=None) -> np.ndarray:
    """Exponentiate and normalize so the result sums to 1.

    Computed with max-subtraction in float64 for stability; the output is
    cast back to the input dtype. With ``axis=None`` the whole array is
    treated as one vector; otherwise normalization runs along ``axis``.

    Raises ValueError on non-finite input.
    """
    arr = np.asarray(values)
    if arr.size == 0:
        raise ValueError("softmax_normalize needs at least one value")
    if not np.isfinite(arr).all():
        raise ValueError("softmax_normalize requires finite input")
    work = arr.astype(np.float64, copy=False)
    shifted = work - work.max(axis=axis, keepdims=axis is not None)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=axis is not None)
    if arr.dtype in (np.float32, np.float64):
        return out.astype(arr.dtype, copy=False)
    return out


@dataclass(frozen=True)
class KernelFieldReport:
    """Result of checking the averaging contract over a kernel field."""

    max_sum_deviation: float
    min_weight: float
    violating_pixels: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.violating_pixels == 0


def validate_kernel_field(kfield: KernelField, tol: float = KERNEL_SUM_TOL) -> KernelFieldReport:
    """Report how far a field strays from the averaging contract.

    For every pixel and channel group the weights over (dy, dx, t) should
    sum to 1 and be nonnegative. A pixel violates if ``|sum - 1| > tol`` or
    its smallest weight is below ``-tol``.
    """
    w = kfield.weights
    sums = w.sum(axis=(2, 3, 4), dtype=np.float64)  # (H, W, C)
    mins = w.min(axis=(2, 3, 4))
    dev = np.abs(sums - 1.0)
    bad = (dev > tol) | (mins < -tol)
    return KernelFieldReport(
        max_sum_deviation=float(dev.max()),
        min_weight=float(mins.min()),
        violating_pixels=int(bad.sum()),
        tol=tol,
    )


# ---------------------------------------------------------------------------
# Tensor container ("BKT1")
# ---------------------------------------------------------------------------
#
# Layout: magic "BKT1" | u32 rank | u32 dims[rank] | f32 payload, all
# little-endian, row-major. Payloads are always 32-bit floats; saving a
# float64 array downcasts it.

_U32_MAX = 2**32 - 1
_HEADER = struct.Struct("<4sI")


def save_tensor(path, array) -> None:
    """Write an array to ``path`` in the BKT1 container format."""
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if arr.ndim > _U32_MAX or any(d > _U32_MAX for d in arr.shape):
        raise TensorFormatError("tensor dimensions overflow the u32 header")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TENSOR_MAGIC, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a BKT1 tensor; returns a float32 array."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise TensorFormatError("truncated tensor header")
        magic, rank = _HEADER.unpack(head)
        if magic != TENSOR_MAGIC:
            raise TensorFormatError(f"bad magic {magic!r}")
        dim_bytes = fh.read(4 * rank)
        if len(dim_bytes) < 4 * rank:
            raise TensorFormatError("truncated dimension list")
        dims = struct.unpack(f"<{rank}I", dim_bytes)
        count = 1
        for d in dims:
            count *= d
        payload = fh.read(4 * count)
        if len(payload) < 4 * count:
            raise TensorFormatError("truncated payload")
        if fh.read(1):
            raise TensorFormatError("trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


# ---------------------------------------------------------------------------
# PNG ingest/export (8- or 16-bit, linear scaling to [0, 1])
# ---------------------------------------------------------------------------


def save_image_png(path, image: Image, bit_depth: int = 8) -> None:
    """Export an image to PNG, clipping to [0, 1] and scaling linearly."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    data = np.clip(image.data, 0.0, 1.0)
    if image.channels == 1:
        plane = data[:, :, 0]
        if bit_depth == 8:
            arr = np.round(plane * 255.0).astype(np.uint8)
        else:
            arr = np.round(plane * 65535.0).astype(np.uint16)
    elif image.channels == 3:
        if bit_depth != 8:
            raise ValueError("16-bit export is single-channel only")
        arr = np.round(data * 255.0).astype(np.uint8)
    else:
        raise ValueError(f"cannot export {image.channels}-channel image as PNG")
    _PILImage.fromarray(arr).save(path, format="PNG")


def load_image_png(path) -> Image:
    """Load an 8- or 16-bit PNG as a float32 image scaled to [0, 1]."""
    with _PILImage.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B"):
            arr = np.asarray(im, dtype=np.float32) / 65535.0
        elif im.mode in ("L", "RGB"):
            arr = np.asarray(im, dtype=np.float32) / 255.0
        elif im.mode in ("LA", "RGBA", "P"):
            conv = im.convert("RGB")
            arr = np.asarray(conv, dtype=np.float32) / 255.0
        else:
            raise ValueError(f"unsupported PNG mode {im.mode!r}")
    return Image(arr.astype(np.float32))
