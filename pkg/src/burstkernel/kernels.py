"""Per-pixel kernel estimation, low-rank compression, and subspace analysis.

Kernel fields are estimated classically from patch similarities (no
learned components), compressed onto a burst-specific basis by truncated
SVD, and reconstructed as per-pixel linear combinations of the basis
elements. Rank and overlap statistics quantify how much subspace two
bursts share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import (
    Burst,
    CoefficientField,
    Image,
    KernelBasis,
    KernelField,
    NoiseParams,
    softmax_normalize,
)

# keeps the similarity logits defined when noise parameters are zero
_VARIANCE_FLOOR = 1e-20

DEFAULT_RANK_TOL = 1e-6


def _patch_distance_maps(frames: np.ndarray, ref_channel: np.ndarray, k: int, patch_radius: int):
    """Mean squared patch distances for every (offset, frame) pair.

    frames: (T, H, W) single-channel planes; ref_channel: (H, W).
    Distances compare the reference patch at n with the patch at n - delta
    in frame t. Both are read from zero-padded planes, so every offset is
    defined; taps that reach past the border compare against zeros and
    end up dissimilar for non-dark content.

    Returns (H, W, K, K, T) float64.
    """
    t_count, h, w = frames.shape
    p = patch_radius
    r = (k - 1) // 2
    size = 2 * p + 1
    ref_ext = np.zeros((h + 2 * p, w + 2 * p))
    ref_ext[p : p + h, p : p + w] = ref_channel
    d2 = np.empty((h, w, k, k, t_count))
    canvas = np.zeros((h + 2 * (p + r), w + 2 * (p + r)))
    for t in range(t_count):
        canvas[:] = 0.0
        canvas[p + r : p + r + h, p + r : p + r + w] = frames[t]
        for ai in range(k):
            dy = ai - r
            for aj in range(k):
                dx = aj - r
                # values of frame t at m - delta over the extended grid
                shifted = canvas[r - dy : r - dy + h + 2 * p, r - dx : r - dx + w + 2 * p]
                sq = (ref_ext - shifted) ** 2
                mean = ndimage.uniform_filter(sq, size=size, mode="constant")
                d2[:, :, ai, aj, t] = mean[p : p + h, p : p + w]
    return d2


def estimate_kernels_nlm(
    noisy: Burst,
    params: NoiseParams,
    patch_radius: int = 1,
    K: int = 15,
    h: float = 0.6,
    dtype=np.float64,
) -> KernelField:
    """Estimate per-pixel averaging kernels from patch similarities.

    For each pixel n, offset delta and frame t, the weight is the softmax
    over all (delta, t) of ``-d2 / (2 h^2 sigma2)``, where d2 is the mean
    squared difference between the reference patch at n and the frame-t
    patch at n - delta, and ``sigma2 = sigma_r^2 + sigma_s^2 * max(mu, 0)``
    is the local noise variance at the patch mean mu of the reference.
    The bandwidth h is relative to the local noise level.

    Multi-channel bursts get one kernel group per channel, estimated from
    that channel's own distances.
    """
    if K < 1 or K % 2 == 0:
        raise ValueError("K must be odd and positive")
    if h <= 0:
        raise ValueError("bandwidth h must be positive")
    if patch_radius < 0:
        raise ValueError("patch_radius must be nonnegative")
    stack = noisy.stacked(np.float64)  # (T, H, W, C)
    t_count, hh, ww, cc = stack.shape
    size = 2 * patch_radius + 1
    weights = np.empty((hh, ww, K, K, t_count, cc), dtype=dtype)
    for ci in range(cc):
        planes = stack[:, :, :, ci]
        d2 = _patch_distance_maps(planes, planes[0], K, patch_radius)
        local_mean = ndimage.uniform_filter(planes[0], size=size, mode="constant")
        sigma2 = np.maximum(params.variance(local_mean), _VARIANCE_FLOOR)
        logits = d2 / (-2.0 * h * h * sigma2[:, :, None, None, None])
        flat = logits.reshape(hh, ww, -1)
        flat = flat - flat.max(axis=2, keepdims=True)
        np.exp(flat, out=flat)
        flat /= flat.sum(axis=2, keepdims=True)
        weights[:, :, :, :, :, ci] = flat.reshape(hh, ww, K, K, t_count).astype(dtype, copy=False)
    return KernelField(weights, normalized=True)


def reconstruct_kernels(basis: KernelBasis, coeffs: CoefficientField, dtype=None) -> KernelField:
    """Per-pixel kernels as coefficient-weighted sums of basis elements.

    The result is normalized-flagged only when both inputs are, in which
    case every kernel is a convex combination of simplex points.
    """
    if basis.B != coeffs.B:
        raise ValueError(f"basis B={basis.B} does not match coefficients B={coeffs.B}")
    dt = np.dtype(dtype) if dtype is not None else np.result_type(basis.elements, coeffs.coeffs)
    k, _, t, c, b = basis.elements.shape
    h, w = coeffs.height, coeffs.width
    mat = coeffs.coeffs.reshape(h * w, b).astype(dt, copy=False)
    vmat = basis.as_matrix().astype(dt, copy=False)  # (B, K*K*T*C)
    weights = (mat @ vmat).reshape(h, w, k, k, t, c)
    return KernelField(weights, normalized=basis.normalized and coeffs.normalized)


def compress_kernel_field(kfield: KernelField, B: int):
    """Best rank-B factorization of a kernel field (truncated SVD).

    Reshapes the field to an (H*W) x (K*K*T*C) matrix, computes its SVD
    in float64, and splits the top B components into a basis (right
    singular vectors) and coefficients (left vectors scaled by the
    singular values). Outputs are unconstrained — weights may go
    negative — so both carry ``normalized=False``; see
    ``project_kernel_field`` to restore the averaging contract.

    Returns ``(basis, coefficients)``.
    """
    h, w, k, _, t, c = kfield.weights.shape
    d = k * k * t * c
    if B < 1 or B > min(h * w, d):
        raise ValueError(f"B must be in [1, {min(h * w, d)}], got {B}")
    mat = kfield.weights.reshape(h * w, d).astype(np.float64, copy=False)
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    basis = KernelBasis(np.moveaxis(vt[:B].reshape(B, k, k, t, c), 0, -1), normalized=False)
    coeffs = CoefficientField((u[:, :B] * s[:B]).reshape(h, w, B), normalized=False)
    return basis, coeffs


def project_kernel_field(kfield: KernelField) -> KernelField:
    """Clamp negative weights and renormalize per-pixel sums to 1.

    Restores the averaging contract on unconstrained fields (e.g. after
    SVD compression). Pixels whose clamped weights sum to zero fall back
    to the uniform kernel.
    """
    w = np.maximum(kfield.weights, 0.0)
    sums = w.sum(axis=(2, 3, 4), keepdims=True)
    taps = kfield.K * kfield.K * kfield.T
    uniform = 1.0 / taps
    out = np.where(sums > 0, w / np.maximum(sums, 1e-300), uniform)
    return KernelField(out, normalized=True)


def _numerical_rank(matrix: np.ndarray, tol: float) -> int:
    s = np.linalg.svd(matrix.astype(np.float64, copy=False), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int((s > tol * s[0]).sum())


def basis_rank(basis: KernelBasis, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``tol`` times the largest.

    Basis elements are not required to be linearly independent, so the
    rank can be lower than B.
    """
    return _numerical_rank(basis.as_matrix(), tol)


def basis_singular_values(basis: KernelBasis) -> np.ndarray:
    """Singular values of the B x (K*K*T*C) basis matrix, descending."""
    return np.linalg.svd(basis.as_matrix().astype(np.float64, copy=False), compute_uv=False)


def union_rank(v: KernelBasis, v2: KernelBasis, tol: float = DEFAULT_RANK_TOL) -> int:
    """Numerical rank of the concatenated 2B-row basis matrix."""
    if (v.K, v.T, v.C) != (v2.K, v2.T, v2.C):
        raise ValueError("bases must share K, T, and channel count")
    return _numerical_rank(np.concatenate([v.as_matrix(), v2.as_matrix()], axis=0), tol)


def overlap_ratio(v: KernelBasis, v2: KernelBasis, tol: float = DEFAULT_RANK_TOL) -> float:
    """Shared-subspace measure ``1 - rank([v; v2]) / (rank(v) + rank(v2))``.

    0 for bases spanning independent subspaces, 0.5 when one subspace
    contains the other (e.g. identical full-rank bases). The union rank
    uses the concatenated 2B-row matrix with the same tolerance rule.
    """
    ra = basis_rank(v, tol)
    rb = basis_rank(v2, tol)
    if ra + rb == 0:
        return 0.0
    return 1.0 - union_rank(v, v2, tol) / (ra + rb)


# ---------------------------------------------------------------------------
# Coefficient clustering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray  # (H, W) int32
    centroids: np.ndarray  # (k, B)
    wcss: float
    n_iter: int

    def label_image(self) -> Image:
        """Labels as a grayscale image with one level per cluster."""
        k = self.centroids.shape[0]
        scale = 1.0 / max(k - 1, 1)
        return Image((self.labels * scale).astype(np.float32)[:, :, None])


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    idx = int(rng.integers(n))
    centroids[0] = points[idx]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def cluster_coefficients(coeffs: CoefficientField, k: int, iters: int = 100, seed: int = 0) -> KMeansResult:
    """Cluster per-pixel coefficient vectors with seeded k-means.

    Euclidean Lloyd iterations from a k-means++ start; deterministic for
    a given seed, and the within-cluster sum of squares never increases
    from one iteration to the next. Empty clusters are reseeded to the
    point currently farthest from its centroid.
    """
    h, w, b = coeffs.coeffs.shape
    n = h * w
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of pixels {n}")
    points = coeffs.coeffs.reshape(n, b).astype(np.float64, copy=False)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    labels = np.zeros(n, dtype=np.int32)
    sq_norms = (points**2).sum(axis=1)
    n_iter = 0
    for n_iter in range(1, iters + 1):
        d2 = sq_norms[:, None] - 2.0 * (points @ centroids.T) + (centroids**2).sum(axis=1)[None, :]
        new_labels = d2.argmin(axis=1).astype(np.int32)
        for ci in range(k):
            mask = new_labels == ci
            if mask.any():
                centroids[ci] = points[mask].mean(axis=0)
            else:
                worst = int(np.take_along_axis(d2, new_labels[:, None].astype(np.int64), 1).argmax())
                centroids[ci] = points[worst]
                new_labels[worst] = ci
        if np.array_equal(new_labels, labels) and n_iter > 1:
            labels = new_labels
            break
        labels = new_labels
    diffs = points - centroids[labels]
    wcss = float((diffs**2).sum())
    return KMeansResult(labels.reshape(h, w), centroids, wcss, n_iter)
