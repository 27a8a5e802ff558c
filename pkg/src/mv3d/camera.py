"""Pinhole camera geometry: depth-clamped projection and unprojection.

Conventions used throughout the package:
  * pixel coordinates are (x, y) = (column, row), in pixels;
  * normalized image coordinates divide pixel coordinates by (W-1, H-1) and
    clamp to [0, 1], so 0 and 1 land on the first/last pixel centers
    (matching the align-corners bilinear sampling in the tensor core);
  * the camera frame has z pointing forward; depth is camera-frame z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .nn.tensor import Tensor, as_tensor, maximum, stack

DEPTH_EPS = 0.01  # numerical stabilizer for near-plane projection


@dataclass(frozen=True)
class CameraView:
    k: np.ndarray          # 3x3 intrinsics, pixels
    r: np.ndarray          # 3x3 world-to-camera rotation
    t: np.ndarray          # 3-vector translation, meters
    width: int
    height: int
    view_id: int

    def __post_init__(self):
        object.__setattr__(self, "k", np.asarray(self.k, dtype=np.float64))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if self.k.shape != (3, 3) or self.r.shape != (3, 3):
            raise ValueError("K and R must be 3x3")
        if np.abs(self.r @ self.r.T - np.eye(3)).max() > 1e-9:
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(self.r) - 1.0) > 1e-9:
            raise ValueError("R must have determinant +1")
        if np.abs(np.tril(self.k, -1)).max() > 0 or self.k[0, 0] <= 0 or self.k[1, 1] <= 0:
            raise ValueError("K must be upper-triangular with positive focals")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.r.T @ self.t

    def to_dict(self) -> dict:
        return {
            "k": self.k.tolist(), "r": self.r.tolist(), "t": self.t.tolist(),
            "width": self.width, "height": self.height, "view_id": self.view_id,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraView":
        return CameraView(np.array(d["k"]), np.array(d["r"]), np.array(d["t"]),
                          int(d["width"]), int(d["height"]), int(d["view_id"]))


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W) meters, camera frame
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape:
            raise ValueError("depth and validity mask shapes differ")
        held = self.depth[self.valid]
        if held.size and (not np.isfinite(held).all() or (held <= 0).any()):
            raise ValueError("valid depths must be finite and positive")

    def filled(self) -> np.ndarray:
        """Depth with invalid pixels replaced by the nearest valid value."""
        if self.valid.all():
            return self.depth
        if not self.valid.any():
            raise ValueError("depth map has no valid pixels to fill from")
        idx = ndimage.distance_transform_edt(~self.valid, return_distances=False,
                                             return_indices=True)
        return self.depth[tuple(idx)]


def project(points: np.ndarray, cam: CameraView, eps: float = DEPTH_EPS):
    """Project world points to normalized image coords with depth clamping.

    Returns ``(uv, z)`` where ``uv`` is in [0, 1]^2 and ``z`` is the raw
    (unclamped) camera depth.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam_pts = pts @ cam.r.T + cam.t
    z = cam_pts[:, 2]
    denom = np.maximum(z, eps)
    hom = cam_pts @ cam.k.T
    px = hom[:, 0] / denom
    py = hom[:, 1] / denom
    u = np.clip(px / (cam.width - 1), 0.0, 1.0)
    v = np.clip(py / (cam.height - 1), 0.0, 1.0)
    uv = np.stack([u, v], axis=-1)
    if np.asarray(points).ndim == 1:
        return uv[0], z[0]
    return uv, z


def project_tensor(points: Tensor, cam: CameraView, eps: float = DEPTH_EPS):
    """Differentiable variant of :func:`project` for (N, 3) tensors."""
    pts = as_tensor(points)
    cam_pts = pts @ Tensor(cam.r.T) + Tensor(cam.t)
    z = cam_pts[:, 2]
    denom = maximum(z, eps)
    hom = cam_pts @ Tensor(cam.k.T)
    u = (hom[:, 0] / denom * (1.0 / (cam.width - 1))).clip(0.0, 1.0)
    v = (hom[:, 1] / denom * (1.0 / (cam.height - 1))).clip(0.0, 1.0)
    return stack([u, v], axis=-1), z


def unproject(pixels: np.ndarray, depth: np.ndarray, cam: CameraView) -> np.ndarray:
    """Invert the pinhole map at pixel (x, y) coordinates and metric depth."""
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    if (d <= 0).any():
        raise ValueError("unproject requires positive depth")
    ones = np.ones((len(pix), 1))
    rays = np.concatenate([pix, ones], axis=1) @ np.linalg.inv(cam.k).T
    cam_pts = rays * d[:, None]
    world = (cam_pts - cam.t) @ cam.r
    if np.asarray(pixels).ndim == 1:
        return world[0]
    return world


def _bilinear_np(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape
    px = np.clip(x, 0.0, w - 1.0)
    py = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(px).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(py).astype(int), 0, max(h - 2, 0))
    fx, fy = px - x0, py - y0
    top = img[y0, x0] * (1 - fx) + img[y0, np.minimum(x0 + 1, w - 1)] * fx
    bot = (img[np.minimum(y0 + 1, h - 1), x0] * (1 - fx)
           + img[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)] * fx)
    return top * (1 - fy) + bot * fy


def cell_center_pixels(height: int, width: int, stride: int):
    """Pixel (x, y) coordinates of feature-cell centers at the given stride."""
    ys = np.arange(height // stride) * stride + (stride - 1) / 2.0
    xs = np.arange(width // stride) * stride + (stride - 1) / 2.0
    gx, gy = np.meshgrid(xs, ys)
    return gx, gy


def unproject_grid(depth: DepthMap, cam: CameraView, stride: int = 1) -> np.ndarray:
    """World coordinate per feature cell, sampled at cell-center pixels.

    Holes in the depth map are filled from the nearest valid pixel before
    sampling; half-pixel centers (even strides) interpolate bilinearly.
    """
    h, w = depth.depth.shape
    if h % stride or w % stride:
        raise ValueError(f"stride {stride} does not divide depth map {(h, w)}")
    filled = depth.filled()
    gx, gy = cell_center_pixels(h, w, stride)
    if stride == 1:
        d = filled
    else:
        d = _bilinear_np(filled, gx.reshape(-1), gy.reshape(-1)).reshape(gx.shape)
    pix = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)
    world = unproject(pix, d.reshape(-1), cam)
    return world.reshape(h // stride, w // stride, 3)
