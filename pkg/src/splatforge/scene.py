"""Core scene types: cameras, point clouds, splat clouds, and the camera math
every other module leans on.

Conventions, used consistently everywhere:
  * camera space: +z forward, +x right, +y down
  * pixel centers sit at integer + 0.5; u runs along x (columns), v along y (rows)
  * poses are 4x4 cam_to_world rigid transforms, row-major
  * image buffers are float32 row-major, (H, W, 3) for color in [0, 1],
    (H, W) for depth (camera-space z, <= 0 meaning invalid) and masks (0/1)
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .errors import (
    BehindCamera,
    EmptyCloud,
    NonPositiveDepth,
    NonRigidTransform,
    ShapeMismatch,
    ZeroQuaternion,
)

Z_EPS = 1e-8          # camera-space z below this counts as behind the camera
RIGID_TOL = 1e-6

# point-cloud source tags
TAG_REF = 0           # lifted from the reference view; aux views use 1, 2, ...
TAG_OCCLUSION = -1    # synthesized occlusion-volume points


def validate_rigid(mat, tol=RIGID_TOL):
    """Check a 4x4 is a rigid transform: R orthonormal, det +1, bottom row [0,0,0,1]."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (4, 4):
        raise ShapeMismatch(f"pose must be 4x4, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise NonRigidTransform("pose contains non-finite values")
    r = mat[:3, :3]
    if np.max(np.abs(r @ r.T - np.eye(3))) > tol:
        raise NonRigidTransform("rotation block is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise NonRigidTransform("rotation block must have det +1")
    if np.max(np.abs(mat[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > tol:
        raise NonRigidTransform("bottom row must be [0, 0, 0, 1]")
    return mat


def rigid_inverse(mat):
    """Inverse of a rigid 4x4 without a general solve."""
    mat = np.asarray(mat, dtype=np.float64)
    out = np.eye(4)
    r = mat[:3, :3]
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ mat[:3, 3]
    return out


@dataclasses.dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid pose.

    fx, fy, cx, cy are in pixels; width/height give the image size the
    intrinsics refer to. cam_to_world is validated at construction.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ShapeMismatch("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ShapeMismatch("image size must be positive")
        mat = validate_rigid(self.cam_to_world)
        object.__setattr__(self, "cam_to_world", mat)

    @property
    def rotation(self):
        """3x3 cam_to_world rotation."""
        return self.cam_to_world[:3, :3]

    @property
    def position(self):
        """Camera center in world coordinates."""
        return self.cam_to_world[:3, 3]

    @property
    def world_to_cam(self):
        return rigid_inverse(self.cam_to_world)

    def with_pose(self, cam_to_world):
        return dataclasses.replace(self, cam_to_world=np.asarray(cam_to_world))

    def resized(self, width, height):
        """Same view at a different resolution; intrinsics scale along."""
        sx = width / self.width
        sy = height / self.height
        return dataclasses.replace(
            self, width=width, height=height,
            fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy,
        )


def project_point(camera, p):
    """World point -> (u, v, depth). Raises BehindCamera when z <= Z_EPS.

    u, v are continuous pixel coordinates: u = fx * x/z + cx.
    """
    p = np.asarray(p, dtype=np.float64)
    pc = camera.rotation.T @ (p - camera.position)
    if pc[2] <= Z_EPS:
        raise BehindCamera(f"point has camera-space z {pc[2]:.3g}")
    u = camera.fx * pc[0] / pc[2] + camera.cx
    v = camera.fy * pc[1] / pc[2] + camera.cy
    return float(u), float(v), float(pc[2])


def unproject_pixel(camera, u, v, depth):
    """Continuous pixel coordinate + camera-space depth -> world point."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth must be > 0, got {depth}")
    x = (u - camera.cx) / camera.fx * depth
    y = (v - camera.cy) / camera.fy * depth
    pc = np.array([x, y, depth], dtype=np.float64)
    return camera.rotation @ pc + camera.position


def project_points(camera, pts):
    """Vectorized projection. Returns (uv (N,2), z (N,), valid (N,) bool).

    No raising: out-of-frustum points simply come back invalid.
    """
    pts = np.asarray(pts, dtype=np.float64)
    pc = (pts - camera.position) @ camera.rotation  # row-vector form of R^T p
    z = pc[:, 2]
    valid = z > Z_EPS
    zsafe = np.where(valid, z, 1.0)
    uv = np.empty((len(pts), 2))
    uv[:, 0] = camera.fx * pc[:, 0] / zsafe + camera.cx
    uv[:, 1] = camera.fy * pc[:, 1] / zsafe + camera.cy
    return uv, z, valid


def unproject_grid(camera, depth, mask=None):
    """Lift a full depth map at pixel centers. Returns (points (M,3), index (M,) flat pixel ids).

    Pixels where mask is 0 or depth <= 0 are skipped.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (camera.height, camera.width):
        raise ShapeMismatch(f"depth {depth.shape} vs camera {(camera.height, camera.width)}")
    keep = depth > 0
    if mask is not None:
        keep &= np.asarray(mask) > 0.5
    vv, uu = np.nonzero(keep)
    d = depth[vv, uu]
    u = uu + 0.5
    v = vv + 0.5
    x = (u - camera.cx) / camera.fx * d
    y = (v - camera.cy) / camera.fy * d
    pc = np.stack([x, y, d], axis=1)
    world = pc @ camera.rotation.T + camera.position
    return world, vv * camera.width + uu


def quat_to_rotmat(q):
    """Normalized rotation matrix from a (possibly unnormalized) wxyz quaternion."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ZeroQuaternion("quaternion norm below 1e-12")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotmats(q):
    """Batch quaternion -> rotation matrices, (N,4) -> (N,3,3)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=1)
    if np.any(n < 1e-12):
        raise ZeroQuaternion("quaternion norm below 1e-12")
    w, x, y, z = (q / n[:, None]).T
    out = np.empty((len(q), 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def splat_covariance(scale, quat):
    """3D covariance R diag(s) diag(s)^T R^T from linear-space scale and quaternion."""
    s = np.asarray(scale, dtype=np.float64)
    r = quat_to_rotmat(quat)
    m = r * s[None, :]
    return m @ m.T


@dataclasses.dataclass
class PointCloud:
    """Colored points with a source tag per point (TAG_REF, aux index, TAG_OCCLUSION)."""

    positions: np.ndarray  # (N,3) f32
    colors: np.ndarray     # (N,3) f32 in [0,1]
    tags: np.ndarray       # (N,) int32

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float32)
        self.tags = np.ascontiguousarray(self.tags, dtype=np.int32)
        n = len(self.positions)
        if self.positions.shape != (n, 3) or self.colors.shape != (n, 3):
            raise ShapeMismatch("positions and colors must both be (N,3)")
        if self.tags.shape != (n,):
            raise ShapeMismatch("tags must be (N,)")

    def __len__(self):
        return len(self.positions)

    @staticmethod
    def empty():
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0,)))

    def extend(self, other):
        return PointCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.colors, other.colors]),
            np.concatenate([self.tags, other.tags]),
        )

    def extent(self):
        """Diagonal length of the axis-aligned bounding box."""
        if len(self) == 0:
            raise EmptyCloud("extent of an empty cloud")
        span = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(np.linalg.norm(span.astype(np.float64)))


@dataclasses.dataclass(frozen=True)
class Splat:
    """One Gaussian primitive, in storage parameterization."""

    mu: np.ndarray            # (3,)
    log_scale: np.ndarray     # (3,)
    quat: np.ndarray          # (4,) wxyz, unnormalized storage
    opacity_logit: float
    color: np.ndarray         # (3,) in [0,1]


@dataclasses.dataclass
class SplatCloud:
    """Structure-of-arrays splat set.

    Storage is the optimizer parameterization: log-space scales, logit-space
    opacity, raw quaternions (normalized on read). All arrays float32; the
    trainer upcasts transiently.
    """

    mu: np.ndarray             # (N,3)
    log_scale: np.ndarray      # (N,3)
    quat: np.ndarray           # (N,4)
    opacity_logit: np.ndarray  # (N,)
    color: np.ndarray          # (N,3)

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float32)
        self.log_scale = np.ascontiguousarray(self.log_scale, dtype=np.float32)
        self.quat = np.ascontiguousarray(self.quat, dtype=np.float32)
        self.opacity_logit = np.ascontiguousarray(self.opacity_logit, dtype=np.float32)
        self.color = np.ascontiguousarray(self.color, dtype=np.float32)
        n = len(self.mu)
        shapes = {
            "mu": (n, 3), "log_scale": (n, 3), "quat": (n, 4),
            "opacity_logit": (n,), "color": (n, 3),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ShapeMismatch(f"{name}: expected {want}, got {got}")

    def __len__(self):
        return len(self.mu)

    PARAM_NAMES = ("mu", "log_scale", "quat", "opacity_logit", "color")

    def params(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def scales(self):
        return np.exp(self.log_scale.astype(np.float64))

    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logit.astype(np.float64)))

    def copy(self):
        return SplatCloud(*(getattr(self, n).copy() for n in self.PARAM_NAMES))

    def __getitem__(self, i):
        return Splat(self.mu[i], self.log_scale[i], self.quat[i],
                     float(self.opacity_logit[i]), self.color[i])

    @staticmethod
    def from_splats(splats):
        if not splats:
            raise EmptyCloud("from_splats needs at least one splat")
        return SplatCloud(
            np.stack([s.mu for s in splats]),
            np.stack([s.log_scale for s in splats]),
            np.stack([s.quat for s in splats]),
            np.array([s.opacity_logit for s in splats]),
            np.stack([s.color for s in splats]),
        )

    @staticmethod
    def concatenate(a, b):
        return SplatCloud(*(np.concatenate([getattr(a, n), getattr(b, n)])
                            for n in SplatCloud.PARAM_NAMES))

    def select(self, keep):
        return SplatCloud(*(getattr(self, n)[keep] for n in self.PARAM_NAMES))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-x))


def look_at(position, target, up=(0.0, -1.0, 0.0)):
    """cam_to_world whose +z axis points from position toward target.

    Default up is -y world (y points down in camera space).
    """
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ShapeMismatch("look_at target coincides with position")
    fwd = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(-upv, fwd)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ShapeMismatch("up vector parallel to view direction")
    right /= rn
    down = np.cross(fwd, right)
    mat = np.eye(4)
    mat[:3, 0] = right
    mat[:3, 1] = down
    mat[:3, 2] = fwd
    mat[:3, 3] = position
    return mat
