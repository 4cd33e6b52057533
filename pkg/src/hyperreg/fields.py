"""Stationary-velocity-field integration, warping, and deformation statistics.

Fields are plain arrays, channels-last:
    velocity  v: (H, W, 2)  pixels / unit time, axis order (row, col)
    deformation is stored as displacement u: (H, W, 2), map phi(p) = p + u(p)

Two parallel surfaces share one bilinear kernel: array functions for
generation/evaluation, and *_node builders that emit the same computation
into a GraphBuilder so training can differentiate through the integration.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .diffcore.ops import grid_sample_array


def identity_grid(h, w, dtype=np.float64):
    rr, cc = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return np.stack([rr, cc], axis=-1)


def _check_field(name, arr):
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"{name} must be (H, W, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def integrate_svf(v, steps=5):
    """Group exponential of a stationary velocity field by scaling and squaring.

    Returns the displacement u of phi = exp(v): u0 = v / 2**steps, then
    u <- u(p + u(p)) + u(p), squared `steps` times.
    """
    v = _check_field("velocity", v)
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    grid = identity_grid(*v.shape[:2], dtype=v.dtype)
    u = v / (2.0 ** steps)
    for _ in range(steps):
        u = grid_sample_array(u, grid + u) + u
    return u


def compose(disp_a, disp_b):
    """Displacement of phi_a after phi_b: result(p) = phi_a(phi_b(p)) - p."""
    disp_a = _check_field("disp_a", disp_a)
    disp_b = _check_field("disp_b", disp_b)
    if disp_a.shape != disp_b.shape:
        raise ValueError(f"compose: shape {disp_a.shape} vs {disp_b.shape}")
    grid = identity_grid(*disp_a.shape[:2], dtype=disp_a.dtype)
    return grid_sample_array(disp_a, grid + disp_b) + disp_b


def warp(image, disp):
    """Resample image at phi = id + disp (bilinear, border-clamped)."""
    image = np.asarray(image)
    disp = _check_field("disp", disp)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    if image.shape[:2] != disp.shape[:2]:
        raise ValueError(f"warp: image {image.shape} vs field {disp.shape}")
    grid = identity_grid(*disp.shape[:2], dtype=disp.dtype)
    out = grid_sample_array(image.astype(disp.dtype, copy=False), grid + disp)
    return out[..., 0] if squeeze else out


def one_hot(labels, num_labels):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (num_labels,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def warp_labels(onehot, disp):
    """Soft label warp: each one-hot channel is bilinearly resampled."""
    onehot = np.asarray(onehot)
    if onehot.ndim != 3:
        raise ValueError(f"warp_labels expects (H, W, K) one-hot, got {onehot.shape}")
    return warp(onehot, disp)


def warp_labels_nearest(labels, disp):
    """Hard label warp for evaluation: nearest-neighbor lookup of integer ids."""
    labels = np.asarray(labels)
    disp = _check_field("disp", disp)
    if labels.shape != disp.shape[:2]:
        raise ValueError(f"warp_labels_nearest: labels {labels.shape} vs field {disp.shape}")
    h, w = labels.shape
    grid = identity_grid(h, w) + disp
    rr = np.clip(np.rint(grid[..., 0]), 0, h - 1).astype(np.int64)
    cc = np.clip(np.rint(grid[..., 1]), 0, w - 1).astype(np.int64)
    return labels[rr, cc]


def jacobian_det(disp):
    """det(grad phi) per pixel; central differences inside, one-sided at borders."""
    disp = _check_field("disp", disp)
    phi = identity_grid(*disp.shape[:2], dtype=disp.dtype) + disp
    d_r = np.gradient(phi, axis=0)
    d_c = np.gradient(phi, axis=1)
    return d_r[..., 0] * d_c[..., 1] - d_r[..., 1] * d_c[..., 0]


def jacobian_sd(disp):
    """Population standard deviation of the Jacobian determinant."""
    return float(np.std(jacobian_det(disp)))


def random_smooth_svf(shape, rng, smooth_sigma=6.0, max_norm=2.0):
    """Gaussian-smoothed white noise scaled to a given max vector norm."""
    v = rng.standard_normal((*shape, 2))
    v = np.stack([gaussian_filter(v[..., i], smooth_sigma, mode="nearest") for i in range(2)], axis=-1)
    peak = np.abs(v).max()
    if peak > 0:
        v *= max_norm / peak
    return v


# ---------------------------------------------------------------------------
# graph-node builders (same recipes, emitted as differentiable ops)


def integrate_svf_node(b, v, steps=5):
    h, w, _ = v.shape
    grid = b.const(identity_grid(h, w))
    u = b.scale(v, 1.0 / (2.0 ** steps))
    for _ in range(steps):
        u = b.add(b.grid_sample(u, b.add(grid, u)), u)
    return u


def warp_node(b, image, u):
    h, w, _ = u.shape
    grid = b.const(identity_grid(h, w))
    return b.grid_sample(image, b.add(grid, u))
