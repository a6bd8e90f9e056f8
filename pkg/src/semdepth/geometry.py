"""Pinhole camera, SE(3) poses and differentiable inverse warping.

Tensor layout follows the usual NCHW convention: images are ``B x C x H x W``,
depth maps ``B x 1 x H x W`` and pixel grids ``B x H x W x 2`` holding
``(x, y)`` coordinates in pixels.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

Z_MIN = 1e-3


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image")

    @classmethod
    def kitti_like(cls, width: int, height: int) -> "Intrinsics":
        # normalised KITTI intrinsics used by most monocular pipelines
        return cls(0.58 * width, 1.92 * height, 0.5 * width, 0.5 * height, width, height)

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def matrix(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([[self.fx, 0.0, self.cx],
                             [0.0, self.fy, self.cy],
                             [0.0, 0.0, 1.0]], dtype=dtype)

    def to_text(self) -> str:
        return "".join(f"{k} {getattr(self, k)!r}\n"
                       for k in ("fx", "fy", "cx", "cy", "width", "height"))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Intrinsics":
        """Read a plain ``key value`` (or ``key = value`` / ``key: value``) file."""
        if not os.path.isfile(path):
            raise FileNotFoundError(f"intrinsics file not found: {path}")
        values = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.replace("=", " ").replace(":", " ").split()
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 'key value', got {line!r}")
                values[parts[0]] = parts[1]
        missing = {"fx", "fy", "cx", "cy", "width", "height"} - set(values)
        if missing:
            raise ValueError(f"{path}: missing keys {sorted(missing)}")
        return cls(float(values["fx"]), float(values["fy"]), float(values["cx"]),
                   float(values["cy"]), int(float(values["width"])), int(float(values["height"])))


@dataclass
class Pose:
    """Rigid transform ``x -> R x + t`` (translation in meters)."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def check(self, tol: float = 1e-6):
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1) > tol:
            raise ValueError("rotation is not a proper orthonormal matrix")
        return self

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)


def skew(v: torch.Tensor) -> torch.Tensor:
    """``(..., 3) -> (..., 3, 3)`` cross-product matrices."""
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([zero, -z, y], -1),
        torch.stack([z, zero, -x], -1),
        torch.stack([-y, x, zero], -1),
    ], -2)


def se3_exp(axis_angle: torch.Tensor, translation: torch.Tensor) -> torch.Tensor:
    """Build ``(..., 4, 4)`` transforms from axis-angle rotations and translations.

    The rotation is the matrix exponential of the skew matrix, which stays
    differentiable at the zero rotation.
    """
    axis_angle = torch.as_tensor(axis_angle)
    translation = torch.as_tensor(translation, dtype=axis_angle.dtype)
    R = torch.linalg.matrix_exp(skew(axis_angle))
    top = torch.cat([R, translation.unsqueeze(-1)], -1)
    bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=top.dtype, device=top.device)
    bottom[..., 0, 3] = 1
    return torch.cat([top, bottom], -2)


def invert_transform(T: torch.Tensor) -> torch.Tensor:
    """Inverse of ``(..., 4, 4)`` rigid transforms."""
    R_t = T[..., :3, :3].transpose(-1, -2)
    t = -(R_t @ T[..., :3, 3:])
    top = torch.cat([R_t, t], -1)
    return torch.cat([top, T[..., 3:, :]], -2)


def _as_k(K, batch, dtype, device):
    if isinstance(K, Intrinsics):
        K = K.matrix(dtype)
    K = torch.as_tensor(K, dtype=dtype, device=device)[..., :3, :3]
    if K.dim() == 2:
        K = K.expand(batch, 3, 3)
    return K


def pixel_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``H x W x 2`` grid of ``(x, y)`` pixel centres."""
    ys, xs = torch.meshgrid(torch.arange(height, dtype=dtype, device=device),
                            torch.arange(width, dtype=dtype, device=device), indexing="ij")
    return torch.stack([xs, ys], -1)


def backproject(depth: torch.Tensor, K) -> torch.Tensor:
    """Lift a ``B x 1 x H x W`` depth map to camera-frame points ``B x 3 x H x W``."""
    if depth.dim() == 2:
        depth = depth[None, None]
    if bool((depth <= 0).any()):
        raise ValueError("backproject needs strictly positive depth")
    b, _, h, w = depth.shape
    K = _as_k(K, b, depth.dtype, depth.device)
    grid = pixel_grid(h, w, depth.dtype, depth.device)
    homo = torch.cat([grid, torch.ones_like(grid[..., :1])], -1).reshape(-1, 3).T
    rays = torch.linalg.inv(K) @ homo
    return rays.reshape(b, 3, h, w) * depth


def project(points: torch.Tensor, K, T=None) -> torch.Tensor:
    """Transform ``B x 3 x H x W`` points by ``T`` and project them to pixels.

    Returns a ``B x H x W x 2`` grid. Depth is clamped to ``Z_MIN`` before the
    perspective division; out-of-frame coordinates are returned unchanged.
    """
    b, _, h, w = points.shape
    K = _as_k(K, b, points.dtype, points.device)
    pts = points.reshape(b, 3, -1)
    if T is not None:
        T = torch.as_tensor(T, dtype=points.dtype, device=points.device)
        if T.dim() == 2:
            T = T.expand(b, 4, 4)
        pts = T[:, :3, :3] @ pts + T[:, :3, 3:]
    cam = K @ pts
    z = cam[:, 2:].clamp(min=Z_MIN)
    pix = cam[:, :2] / z
    return pix.reshape(b, 2, h, w).permute(0, 2, 3, 1)


def warp_bilinear(source: torch.Tensor, grid: torch.Tensor):
    """Sample ``source`` at pixel coordinates ``grid`` with bilinear weights.

    Returns ``(warped, valid)`` where ``valid`` is 1 wherever every bilinear
    neighbour lies inside the image. Values outside are edge-replicated, so
    they stay finite but should be masked out by the caller.
    """
    _, _, h, w = source.shape
    x, y = grid[..., 0], grid[..., 1]
    norm = torch.stack([2 * x / max(w - 1, 1) - 1, 2 * y / max(h - 1, 1) - 1], -1)
    warped = F.grid_sample(source, norm, mode="bilinear", padding_mode="border",
                           align_corners=True)
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    return warped, valid.unsqueeze(1).to(source.dtype)


def disp_to_depth(sigmoid_disp, d_min: float = 0.1, d_max: float = 100.0):
    """Map sigmoid outputs in [0, 1] to metric depth in ``[d_min, d_max]``."""
    if d_min >= d_max:
        raise ValueError(f"d_min ({d_min}) must be smaller than d_max ({d_max})")
    min_disp, max_disp = 1.0 / d_max, 1.0 / d_min
    return 1.0 / (min_disp + (max_disp - min_disp) * sigmoid_disp)


def depth_to_disp(depth, d_min: float = 0.1, d_max: float = 100.0):
    """Inverse of :func:`disp_to_depth`."""
    min_disp, max_disp = 1.0 / d_max, 1.0 / d_min
    return (1.0 / depth - min_disp) / (max_disp - min_disp)


def reproject(source: torch.Tensor, depth: torch.Tensor, K, T: torch.Tensor):
    """Synthesize the target view from ``source`` given target depth and the
    target-to-source transform ``T``."""
    grid = project(backproject(depth, K), K, T)
    return warp_bilinear(source, grid)
