"""Procedural test scenes with exact raycast ground truth.

Scenes are collections of axis-aligned textured rectangles. Rays go through
pixel centers with unit z in the camera frame, so the ray parameter equals
camera-space depth and raycast depth maps agree with the splat renderer's
depth convention.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .errors import ValidationError
from .scene import Camera, PointCloud, look_at

Z_MIN = 1e-6


def checker(scale=1.0, color_a=(0.9, 0.3, 0.2), color_b=(0.15, 0.5, 0.85)):
    """Checkerboard over the quad's local (u, v) surface coordinates."""
    a = np.asarray(color_a, dtype=np.float64)
    b = np.asarray(color_b, dtype=np.float64)

    def tex(u, v):
        parity = (np.floor(u / scale) + np.floor(v / scale)) % 2
        return np.where(parity[..., None] == 0, a, b)

    return tex


def gradient(axis=0, color_lo=(0.05, 0.05, 0.1), color_hi=(0.95, 0.9, 0.8)):
    """Linear blend across the quad between two colors."""
    lo = np.asarray(color_lo, dtype=np.float64)
    hi = np.asarray(color_hi, dtype=np.float64)

    def tex(u, v):
        t = np.clip(u if axis == 0 else v, 0.0, 1.0)[..., None]
        return lo + t * (hi - lo)

    return tex


@dataclass
class Quad:
    """Axis-aligned rectangle: the plane normal points along `axis`.

    `coord` fixes the plane; (ulo, uhi) x (vlo, vhi) bound the two remaining
    axes in the order they appear after removing `axis` from (x, y, z).
    Texture coordinates are normalized to [0, 1] over those bounds.
    """
    axis: int
    coord: float
    ulo: float
    uhi: float
    vlo: float
    vhi: float
    texture: Callable = field(default_factory=checker)

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ValidationError(f"axis must be 0, 1 or 2, got {self.axis}")
        if self.ulo >= self.uhi or self.vlo >= self.vhi:
            raise ValidationError("quad bounds must be increasing")

    @property
    def uv_axes(self):
        return tuple(a for a in (0, 1, 2) if a != self.axis)


class QuadScene:
    """A list of quads with exact ray intersections."""

    def __init__(self, quads: List[Quad]):
        if not quads:
            raise ValidationError("scene needs at least one quad")
        self.quads = list(quads)

    def raycast(self, camera: Camera):
        """Render from a camera. Returns (color HxWx3, depth HxW, hit HxW).

        Depth is camera-space z; misses carry depth 0 and the background
        color black, matching the splat renderer's empty-pixel convention.
        """
        h, w = camera.height, camera.width
        xs = (np.arange(w) + 0.5 - camera.cx) / camera.fx
        ys = (np.arange(h) + 0.5 - camera.cy) / camera.fy
        dirs_cam = np.stack(np.broadcast_arrays(
            xs[None, :], ys[:, None], np.ones((h, w))), axis=-1)
        rot = camera.rotation
        origins = camera.position
        dirs = dirs_cam @ rot.T

        best_t = np.full((h, w), np.inf)
        color = np.zeros((h, w, 3), dtype=np.float64)
        for quad in self.quads:
            ax = quad.axis
            ua, va = quad.uv_axes
            denom = dirs[..., ax]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (quad.coord - origins[ax]) / denom
            pu = origins[ua] + t * dirs[..., ua]
            pv = origins[va] + t * dirs[..., va]
            ok = (np.abs(denom) > 1e-12) & (t > Z_MIN) & (t < best_t) \
                & (pu >= quad.ulo) & (pu <= quad.uhi) \
                & (pv >= quad.vlo) & (pv <= quad.vhi)
            if not ok.any():
                continue
            u = (pu[ok] - quad.ulo) / (quad.uhi - quad.ulo)
            v = (pv[ok] - quad.vlo) / (quad.vhi - quad.vlo)
            color[ok] = quad.texture(u, v)
            best_t[ok] = t[ok]

        hit = np.isfinite(best_t)
        depth = np.where(hit, best_t, 0.0)
        return color.astype(np.float32), depth.astype(np.float32), hit

    def lift(self, camera: Camera, tag=0) -> PointCloud:
        """Ground-truth point cloud: one point per hit pixel."""
        color, depth, hit = self.raycast(camera)
        h, w = camera.height, camera.width
        xs = (np.arange(w) + 0.5 - camera.cx) / camera.fx
        ys = (np.arange(h) + 0.5 - camera.cy) / camera.fy
        d = depth.astype(np.float64)
        pts_cam = np.stack([xs[None, :] * d, ys[:, None] * d, d], axis=-1)
        pts = pts_cam[hit] @ camera.rotation.T + camera.position
        tags = np.full(len(pts), tag, dtype=np.int32)
        return PointCloud(pts, color[hit], tags)


def two_plane_scene(front_z=2.0, back_z=4.0, half=1.6, front_half=0.6):
    """A small front square occluding part of a large back wall.

    Looking down +z from the origin, pixels around the front square see the
    back wall; the wall region directly behind the square is hidden.
    """
    return QuadScene([
        Quad(axis=2, coord=back_z, ulo=-half, uhi=half, vlo=-half, vhi=half,
             texture=checker(scale=0.25)),
        Quad(axis=2, coord=front_z, ulo=-front_half, uhi=front_half,
             vlo=-front_half, vhi=front_half,
             texture=gradient(axis=0, color_lo=(0.9, 0.8, 0.1),
                              color_hi=(0.3, 0.9, 0.4))),
    ])


def room_scene(size=3.0, depth=6.0):
    """An open-fronted box (back wall, floor, ceiling, two side walls) with
    a free-standing partition that hides part of the room from the entrance.
    Distinct textures per surface give renders enough structure for image
    and depth metrics to be meaningful."""
    s = size / 2
    return QuadScene([
        Quad(axis=2, coord=depth, ulo=-s, uhi=s, vlo=-s, vhi=s,
             texture=checker(scale=0.4)),
        Quad(axis=1, coord=s, ulo=-s, uhi=s, vlo=0.5, vhi=depth,
             texture=gradient(axis=1, color_lo=(0.2, 0.25, 0.3),
                              color_hi=(0.8, 0.75, 0.7))),
        Quad(axis=1, coord=-s, ulo=-s, uhi=s, vlo=0.5, vhi=depth,
             texture=gradient(axis=0, color_lo=(0.45, 0.3, 0.2),
                              color_hi=(0.9, 0.8, 0.6))),
        Quad(axis=0, coord=-s, ulo=-s, uhi=s, vlo=0.5, vhi=depth,
             texture=checker(scale=0.5, color_a=(0.7, 0.6, 0.2),
                             color_b=(0.2, 0.4, 0.6))),
        Quad(axis=0, coord=s, ulo=-s, uhi=s, vlo=0.5, vhi=depth,
             texture=gradient(axis=1, color_lo=(0.3, 0.5, 0.4),
                              color_hi=(0.85, 0.9, 0.75))),
        # partition: hides the far right corner from the entrance
        Quad(axis=0, coord=0.6, ulo=-s, uhi=s, vlo=3.4, vhi=4.2,
             texture=checker(scale=0.3, color_a=(0.85, 0.2, 0.5),
                             color_b=(0.95, 0.85, 0.3))),
    ])


def entrance_camera(width=64, height=64, fov_scale=1.0):
    """Reference view into room_scene from just outside the opening."""
    f = fov_scale * 0.9 * width
    pose = look_at(np.array([0.0, 0.0, 0.2]), np.array([0.0, 0.0, 4.0]))
    return Camera(fx=f, fy=f, cx=width / 2, cy=height / 2,
                  width=width, height=height, cam_to_world=pose)
