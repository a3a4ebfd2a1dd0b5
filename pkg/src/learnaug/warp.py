"""Differentiable affine warping and cropping of image batches.

Images are (n, c, h, w) arrays. Warping works in normalized coordinates
on [-1, 1] with the origin at the image center: the center of pixel
(row i, col j) sits at y = 2i/(h-1) - 1, x = 2j/(w-1) - 1. The output at
a target pixel is bilinearly sampled from the input at location
matrix^{-1} @ target, so multiplying matrices in a given order composes
the corresponding image transforms in that same order. Locations outside
the grid read as zero.

``matrix`` arguments accept a single (3, 3) array or a per-sample
(n, 3, 3) stack. All arithmetic is float64; gradients are exact adjoints
of the forward interpolation.
"""

from __future__ import annotations

import math

import numpy as np


def affine_matrix(family: str, a: float) -> np.ndarray:
    """3x3 matrix of one transform family at parameter a.

    rotation/rot180: rotation by a radians; scale-x/scale-y: axis scaling
    by e^a; shear-x: x += a*y; hflip: x-axis sign a (must be +1 or -1).
    """
    if not math.isfinite(a):
        raise ValueError(f"non-finite transform parameter: {a}")
    if family in ("rotation", "rot180"):
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if family == "scale-x":
        return np.diag([math.exp(a), 1.0, 1.0])
    if family == "scale-y":
        return np.diag([1.0, math.exp(a), 1.0])
    if family == "shear-x":
        return np.array([[1.0, a, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    if family == "hflip":
        if a not in (-1.0, 1.0):
            raise ValueError(f"hflip parameter must be +-1, got {a}")
        return np.diag([a, 1.0, 1.0])
    raise ValueError(f"unknown affine family: {family!r}")


def affine_matrix_derivative(family: str, a: float) -> np.ndarray:
    """Entry-wise derivative of affine_matrix(family, a) with respect to a."""
    if family in ("rotation", "rot180"):
        c, s = math.cos(a), math.sin(a)
        return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    if family == "scale-x":
        return np.diag([math.exp(a), 0.0, 0.0])
    if family == "scale-y":
        return np.diag([0.0, math.exp(a), 0.0])
    if family == "shear-x":
        out = np.zeros((3, 3))
        out[0, 1] = 1.0
        return out
    if family == "hflip":
        return np.diag([1.0, 0.0, 0.0])
    raise ValueError(f"unknown affine family: {family!r}")


def _as_batched_matrix(matrix, n: int) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape == (3, 3):
        m = np.broadcast_to(m, (n, 3, 3))
    elif m.shape != (n, 3, 3):
        raise ValueError(f"matrix shape {m.shape} incompatible with batch of {n}")
    return m


def _check_batch(batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4:
        raise ValueError(f"expected (n, c, h, w) batch, got shape {batch.shape}")
    if batch.shape[2] < 2 or batch.shape[3] < 2:
        raise ValueError("warping needs spatial dims >= 2")
    return batch


def _target_grid(h: int, w: int) -> np.ndarray:
    """Homogeneous normalized coordinates of all pixel centers, shape (3, h*w)."""
    xs = 2.0 * np.arange(w) / (w - 1) - 1.0
    ys = 2.0 * np.arange(h) / (h - 1) - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel(), np.ones(h * w)])


def _inverse(matrices: np.ndarray) -> np.ndarray:
    det = np.linalg.det(matrices)
    if np.any(np.abs(det) < 1e-12):
        raise ValueError("singular transform matrix")
    return np.linalg.inv(matrices)


def _snap(coords: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Round source coordinates sitting within tol of a pixel center.

    The normalized<->pixel conversion can land exactly aligned samples
    (identity, flips, half turns) an ulp away from the integer, which
    would smear them across two pixels; snapping keeps those warps exact.
    """
    rounded = np.round(coords)
    return np.where(np.abs(coords - rounded) < tol, rounded, coords)


def _corners(src: np.ndarray, h: int, w: int):
    """Bilinear interpolation data for normalized source coords (n, 3, h*w).

    Returns fractional offsets (u, v) and, per corner, (flat index,
    weight, validity); off-grid corners carry weight zero and a clipped
    index so gathers stay in bounds.
    """
    js = _snap((src[:, 0, :] + 1.0) * (w - 1) / 2.0)
    is_ = _snap((src[:, 1, :] + 1.0) * (h - 1) / 2.0)
    j0 = np.floor(js).astype(np.int64)
    i0 = np.floor(is_).astype(np.int64)
    u = js - j0
    v = is_ - i0
    corners = []
    for di in (0, 1):
        for dj in (0, 1):
            ii, jj = i0 + di, j0 + dj
            valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
            wu = u if dj else 1.0 - u
            wv = v if di else 1.0 - v
            weight = np.where(valid, wu * wv, 0.0)
            flat = np.clip(ii, 0, h - 1) * w + np.clip(jj, 0, w - 1)
            corners.append((flat, weight, valid))
    return u, v, corners


def _gather(flat_batch: np.ndarray, flat_idx: np.ndarray) -> np.ndarray:
    # flat_batch (n, c, h*w), flat_idx (n, h*w) -> (n, c, h*w)
    return np.take_along_axis(flat_batch, flat_idx[:, None, :], axis=2)


def warp_bilinear(batch, matrix) -> np.ndarray:
    """Warp a batch by sampling each output pixel at matrix^{-1} @ target."""
    batch = _check_batch(batch)
    n, c, h, w = batch.shape
    minv = _inverse(_as_batched_matrix(matrix, n))
    src = minv @ _target_grid(h, w)
    _, _, corners = _corners(src, h, w)
    flat = batch.reshape(n, c, h * w)
    out = np.zeros_like(flat)
    for idx, weight, _ in corners:
        out += weight[:, None, :] * _gather(flat, idx)
    return out.reshape(n, c, h, w)


def warp_backward(batch, matrix, d_matrix_d_a, grad_out):
    """Adjoint of warp_bilinear.

    Returns (grad_in, grad_a): grad_in is the cotangent pulled back to the
    input batch, and grad_a[i] chains grad_out through the sample
    coordinates and the matrix derivative d_matrix_d_a for sample i.
    """
    batch = _check_batch(batch)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != batch.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != batch shape {batch.shape}")
    n, c, h, w = batch.shape
    minv = _inverse(_as_batched_matrix(matrix, n))
    dm = _as_batched_matrix(d_matrix_d_a, n)
    src = minv @ _target_grid(h, w)
    # d(M^{-1} p)/da = -M^{-1} (dM/da) M^{-1} p
    dsrc = -minv @ dm @ src
    u, v, corners = _corners(src, h, w)

    flat = batch.reshape(n, c, h * w)
    gflat = grad_out.reshape(n, c, h * w)

    # Input gradient: scatter each corner's interpolation weight.
    grad_in = np.zeros_like(flat)
    nn = np.arange(n)[:, None, None]
    cc = np.arange(c)[None, :, None]
    for idx, weight, _ in corners:
        np.add.at(grad_in, (nn, cc, idx[:, None, :]), weight[:, None, :] * gflat)

    # Corner values masked exactly as in the forward (zero off-grid).
    v00, v01, v10, v11 = [
        np.where(valid[:, None, :], _gather(flat, idx), 0.0)
        for idx, _, valid in corners
    ]
    # d(out)/d(pixel-space source coords); u and v vary with js and is.
    du = (1.0 - v)[:, None, :] * (v01 - v00) + v[:, None, :] * (v11 - v10)
    dv = (1.0 - u)[:, None, :] * (v10 - v00) + u[:, None, :] * (v11 - v01)
    djs_da = dsrc[:, 0, :] * (w - 1) / 2.0
    dis_da = dsrc[:, 1, :] * (h - 1) / 2.0
    grad_a = np.einsum(
        "ncp,ncp->n", gflat, du * djs_da[:, None, :] + dv * dis_da[:, None, :]
    )
    return grad_in.reshape(n, c, h, w), grad_a


def apply_crop(batch, pad: int, offset) -> np.ndarray:
    """Zero-pad by ``pad`` on each side, then take the original-size window
    whose top-left corner is shifted by (dx, dy) from the centered position.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4:
        raise ValueError(f"expected (n, c, h, w) batch, got shape {batch.shape}")
    dx, dy = int(offset[0]), int(offset[1])
    if abs(dx) > pad or abs(dy) > pad:
        raise ValueError(f"crop offset {offset} outside +-{pad}")
    n, c, h, w = batch.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = batch
    top, left = pad + dy, pad + dx
    return padded[:, :, top : top + h, left : left + w]


def transform_features(features, matrix) -> np.ndarray:
    """Act on 2-feature rows with the upper-left 2x2 block of the matrix.

    Point data is transformed directly (x -> A x), unlike images which
    sample at the inverse location.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != 2:
        raise ValueError(f"expected (n, 2) features, got shape {features.shape}")
    m = _as_batched_matrix(matrix, features.shape[0])[:, :2, :2]
    return np.einsum("nij,nj->ni", m, features)
