"""Cameras, rigid object poses, rays and ellipsoids.

Conventions: right-handed world with +y up. Cameras look along +z with image
u to the right and v downward, so a camera-space point (x, y, z) lands at
``u = fx*x/z + cx``, ``v = fy*y/z + cy``. Pixel ``(i, j)`` (column, row) has
its centre at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEAR_EPS = 1e-4


def rot_y(angle) -> np.ndarray:
    """Rotation about +y; maps (1, 0, 0) to (cos a, 0, -sin a)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class ObjectPose:
    location: np.ndarray
    azimuth: float = 0.0

    def __post_init__(self):
        self.location = np.asarray(self.location, dtype=np.float64).reshape(3)


def pose_to_transform(pose: ObjectPose) -> np.ndarray:
    """Homogeneous object-to-world matrix ``translate(location) @ rot_y(azimuth)``."""
    T = np.eye(4)
    T[:3, :3] = rot_y(pose.azimuth)
    T[:3, 3] = pose.location
    return T


@dataclass
class CameraTrack:
    """Shared pinhole intrinsics plus one world-to-camera matrix per frame."""

    intrinsics: tuple[float, float, float, float]
    extrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(-1, 4, 4)
        self.intrinsics = tuple(float(v) for v in self.intrinsics)
        rots = self.extrinsics[:, :3, :3]
        if not np.allclose(rots @ np.swapaxes(rots, 1, 2), np.eye(3), atol=1e-6) or not np.allclose(
            np.linalg.det(rots), 1.0, atol=1e-6
        ):
            raise ValueError("extrinsic rotation blocks must be orthonormal with det +1")

    @property
    def length(self) -> int:
        return len(self.extrinsics)

    @classmethod
    def from_fov(cls, extrinsics, width: int, height: int, fov_y_deg: float = 60.0) -> CameraTrack:
        f = 0.5 * height / np.tan(np.radians(fov_y_deg) / 2)
        return cls((f, f, width / 2, height / 2), extrinsics, width, height)

    def is_ego_centric(self, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.extrinsics[0], np.eye(4), atol=atol))

    def center(self, t: int) -> np.ndarray:
        """Camera position in world coordinates at frame ``t``."""
        E = self.extrinsics[t]
        return -E[:3, :3].T @ E[:3, 3]

    def flatten(self) -> np.ndarray:
        """Top 3x4 block of every extrinsic matrix, concatenated (length 12*L)."""
        return self.extrinsics[:, :3, :].reshape(-1).copy()

    def rebased(self, start: int, length: int) -> CameraTrack:
        """Window of frames re-expressed relative to the window's first camera."""
        window = self.extrinsics[start : start + length]
        inv0 = np.linalg.inv(window[0])
        ext = window @ inv0
        ext[0] = np.eye(4)
        return CameraTrack(self.intrinsics, ext, self.width, self.height)

    def to_json(self) -> dict:
        return {
            "intrinsics": list(self.intrinsics),
            "width": self.width,
            "height": self.height,
            "extrinsics": self.extrinsics.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> CameraTrack:
        return cls(tuple(obj["intrinsics"]), np.array(obj["extrinsics"]), obj["width"], obj["height"])


def to_camera(points: np.ndarray, camera: CameraTrack, t: int) -> np.ndarray:
    E = camera.extrinsics[t]
    return np.asarray(points) @ E[:3, :3].T + E[:3, 3]


def project(points: np.ndarray, camera: CameraTrack, t: int):
    """World points (..., 3) to pixel coordinates, camera depth and a clipped flag."""
    pc = to_camera(points, camera, t)
    fx, fy, cx, cy = camera.intrinsics
    z = pc[..., 2]
    clipped = z <= NEAR_EPS
    safe = np.where(clipped, 1.0, z)
    uv = np.stack([fx * pc[..., 0] / safe + cx, fy * pc[..., 1] / safe + cy], axis=-1)
    return uv, z, clipped


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        self.direction = d / np.linalg.norm(d, axis=-1, keepdims=True)

    def at(self, t) -> np.ndarray:
        return self.origin + np.asarray(t)[..., None] * self.direction


def camera_directions(pixels: np.ndarray, camera: CameraTrack) -> np.ndarray:
    """Unit camera-space ray directions for pixel coordinates (..., 2)."""
    fx, fy, cx, cy = camera.intrinsics
    pixels = np.asarray(pixels, dtype=np.float64)
    d = np.stack(
        [(pixels[..., 0] - cx) / fx, (pixels[..., 1] - cy) / fy, np.ones(pixels.shape[:-1])], axis=-1
    )
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_for_pixel(pixel, camera: CameraTrack, t: int) -> Ray:
    """World-space ray through continuous pixel coordinates ``pixel`` (vectorised)."""
    d_cam = camera_directions(pixel, camera)
    R = camera.extrinsics[t][:3, :3]
    origin = np.broadcast_to(camera.center(t), d_cam.shape)
    return Ray(origin, d_cam @ R)


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of (u, v) pixel-centre coordinates."""
    u, v = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([u, v], axis=-1)


@dataclass
class Ellipsoid:
    center: np.ndarray
    radii: np.ndarray
    azimuth: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(3)
        if np.any(self.radii <= 0):
            raise ValueError(f"ellipsoid radii must be positive, got {self.radii}")

    def implicit(self, points: np.ndarray) -> np.ndarray:
        """``sum((local/radii)**2) - 1``; zero on the surface."""
        local = (np.asarray(points) - self.center) @ rot_y(self.azimuth)
        return np.sum((local / self.radii) ** 2, axis=-1) - 1.0


def ray_ellipsoid_intersect(ray: Ray, e: Ellipsoid):
    """Entry and exit points of ``ray`` through ``e``, or None on a miss.

    Vectorised over leading ray dimensions: returns ``(i1, i2, hit)`` arrays in
    that case, with ``hit`` marking rays whose discriminant is non-negative.
    """
    R = rot_y(e.azimuth)
    o = ((ray.origin - e.center) @ R) / e.radii
    d = (ray.direction @ R) / e.radii
    a = np.sum(d * d, axis=-1)
    b = 2.0 * np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - 1.0
    disc = b * b - 4 * a * c
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t1 = (-b - root) / (2 * a)
    t2 = (-b + root) / (2 * a)
    i1, i2 = ray.at(t1), ray.at(t2)
    if np.ndim(hit) == 0:
        return (i1, i2) if hit else None
    return i1, i2, hit


def circumscribing_ellipsoid(half_extents, pose: ObjectPose) -> Ellipsoid:
    """Symmetric ellipsoid through all eight corners of a posed cuboid (radii sqrt(3)*h)."""
    h = np.asarray(half_extents, dtype=np.float64)
    if np.any(h <= 0):
        raise ValueError(f"cuboid half-extents must be positive, got {h}")
    return Ellipsoid(pose.location, np.sqrt(3.0) * h, pose.azimuth)


def cuboid_corners(half_extents, pose: ObjectPose) -> np.ndarray:
    h = np.asarray(half_extents, dtype=np.float64)
    signs = np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1], indexing="ij")).reshape(3, -1).T
    local = signs * h
    return local @ rot_y(pose.azimuth).T + pose.location


@dataclass
class Box3D:
    """Axis-aligned box given by min and max corners."""

    lo: np.ndarray
    hi: np.ndarray = field(default=None)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.lo > self.hi):
            raise ValueError("box min corner exceeds max corner")

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


def box_iou(a: Box3D, b: Box3D) -> float:
    overlap = np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0, None)
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else (1.0 if np.allclose(a.lo, b.lo) and np.allclose(a.hi, b.hi) else 0.0)


def projected_ellipsoid_bounds(e: Ellipsoid, camera: CameraTrack, t: int):
    """Exact image-space bounding box ``(u0, u1, v0, v1)`` of an ellipsoid's silhouette.

    Uses the dual quadric: the silhouette's dual conic is ``P Q* P^T`` and its
    vertical and horizontal tangent lines give the extents. Returns None when
    part of the ellipsoid lies at or behind the near plane, where the
    silhouette is unbounded and callers should use the full image.
    """
    E = camera.extrinsics[t]
    A = rot_y(e.azimuth) * e.radii  # columns scaled: R @ diag(r)
    z_axis = E[2, :3]
    z_center = z_axis @ e.center + E[2, 3]
    if z_center - np.linalg.norm(A.T @ z_axis) <= NEAR_EPS:
        return None
    M = np.eye(4)
    M[:3, :3] = A
    M[:3, 3] = e.center
    fx, fy, cx, cy = camera.intrinsics
    K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    P = K @ E[:3, :]
    C = P @ M @ np.diag([1.0, 1.0, 1.0, -1.0]) @ M.T @ P.T

    def extent(i):
        # tangent lines with coordinate i equal to w: C_ii - 2 w C_i2 + w^2 C_22 = 0
        half = np.sqrt(max(C[i, 2] ** 2 - C[i, i] * C[2, 2], 0.0))
        return sorted(((C[i, 2] - half) / C[2, 2], (C[i, 2] + half) / C[2, 2]))

    (u0, u1), (v0, v1) = extent(0), extent(1)
    return u0, u1, v0, v1
