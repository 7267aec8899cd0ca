"""Point-cloud initialization from a reference view plus depth estimates.

The flow: align a relative depth map to known geometry, lift pixels into
world-space points, grow the cloud from auxiliary poses by filling holes,
and finally convert points into an initial splat cloud.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (EmptyCloud, EmptyResult, TooFewValid, ValidationError,
                     ZeroVariance)
from .losses import gaussian_blur
from .render import rasterize_points
from .scene import TAG_REF, Camera, PointCloud, SplatCloud, logit

INIT_OPACITY = 0.1
SCALE_CLAMP = (1e-4, 0.1)  # fraction of scene extent
SEAM_BAND_PX = 3
SEAM_SIGMA = 2.0
DEFAULT_NEIGHBORS = 3


class DepthProvider:
    """Interface: request(image) -> relative depth map, same height/width.

    Implementations that need the viewpoint expose set_view(camera); callers
    invoke it before request for that view.
    """

    def request(self, image):
        raise NotImplementedError


@dataclass(frozen=True)
class AlignResult:
    a: float
    b: float
    aligned: np.ndarray
    rms_residual: float


def align_depth(relative, target, valid):
    """Least-squares scale and shift mapping relative depth onto target.

    Solves argmin over (a, b) of the masked sum of (a*r + b - t)^2 via the
    closed-form normal equations.
    """
    relative = np.asarray(relative, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if relative.shape != target.shape or relative.shape != valid.shape:
        raise ValidationError(
            f"shapes disagree: {relative.shape} {target.shape} {valid.shape}")
    r = relative[valid]
    t = target[valid]
    if r.size < 2:
        raise TooFewValid(f"need >= 2 valid pixels, got {r.size}")
    r_mean = r.mean()
    t_mean = t.mean()
    var = float(np.sum((r - r_mean) ** 2))
    if var == 0.0:
        raise ZeroVariance("relative depth is constant on the valid set")
    a = float(np.sum((r - r_mean) * (t - t_mean)) / var)
    b = float(t_mean - a * r_mean)
    aligned = a * relative + b
    rms = float(np.sqrt(np.mean((a * r + b - t) ** 2)))
    return AlignResult(a=a, b=b, aligned=aligned, rms_residual=rms)


def lift_depth(camera, image, depth, mask, tag=TAG_REF):
    """One world-space point per selected pixel with positive depth."""
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    h, w = camera.height, camera.width
    if depth.shape != (h, w) or mask.shape != (h, w) or image.shape[:2] != (h, w):
        raise ValidationError(
            f"lift inputs disagree with {h}x{w}: image {image.shape}, "
            f"depth {depth.shape}, mask {mask.shape}")
    select = mask & (depth > 0)
    if not select.any():
        raise EmptyResult("no valid pixels selected for lifting")
    ys, xs = np.nonzero(select)
    d = depth[select]
    x_cam = (xs + 0.5 - camera.cx) / camera.fx * d
    y_cam = (ys + 0.5 - camera.cy) / camera.fy * d
    pts_cam = np.stack([x_cam, y_cam, d], axis=1)
    pts = pts_cam @ camera.rotation.T + camera.position
    tags = np.full(len(pts), tag, dtype=np.int32)
    return PointCloud(pts, image[select][:, :3], tags)


def make_aux_poses(ref: Camera, offsets):
    """Copies of the reference camera slid along its local x-axis."""
    cams = []
    for off in offsets:
        if not np.isfinite(off):
            raise ValidationError(f"offset {off} is not finite")
        pose = np.array(ref.cam_to_world, copy=True)
        pose[:3, 3] += float(off) * ref.rotation[:, 0]
        cams.append(ref.with_pose(pose))
    return cams


def grow_pointcloud(current: PointCloud, new_cam: Camera, inpainted_image,
                    provider: DepthProvider, tag=TAG_REF):
    """Add points for pixels the current cloud leaves uncovered.

    Renders the cloud from new_cam with a z-buffer point rasterizer, aligns
    the provider's relative depth to the rendered depth over covered pixels,
    and lifts only the hole pixels. Hole depths within SEAM_BAND_PX of the
    coverage boundary are softened with a Gaussian-blurred composite so new
    geometry meets existing geometry without cracks. Existing points are
    never moved or removed.
    """
    if len(current.positions) == 0:
        raise EmptyCloud("cannot grow an empty point cloud")
    _, rendered_depth, hit, _ = rasterize_points(
        current.positions, current.colors, new_cam)
    holes = ~hit
    if not holes.any():
        return current

    hook = getattr(provider, "set_view", None)
    if hook is not None:
        hook(new_cam)
    relative = np.asarray(provider.request(inpainted_image), dtype=np.float64)
    result = align_depth(relative, rendered_depth, hit)
    depth_full = np.where(hit, rendered_depth, result.aligned)
    blurred = gaussian_blur(depth_full, sigma=SEAM_SIGMA)
    near_seam = holes & ndimage.binary_dilation(
        hit, structure=np.ones((3, 3), dtype=bool), iterations=SEAM_BAND_PX)
    depth_new = np.where(near_seam, blurred, result.aligned)
    try:
        added = lift_depth(new_cam, np.asarray(inpainted_image, dtype=np.float64),
                           depth_new, holes, tag=tag)
    except EmptyResult:
        # every hole pixel landed at non-positive depth; nothing to add
        return current
    return current.extend(added)


def init_splats_from_points(points: PointCloud, k=DEFAULT_NEIGHBORS):
    """Isotropic splats at the point locations.

    Scale is the mean distance to the k nearest neighbors, clamped to
    [1e-4, 0.1] of the scene extent; a lone point (extent zero) falls back
    to 0.01 scene units. Opacity starts at 0.1; colors are copied.
    """
    n = len(points.positions)
    if n == 0:
        raise EmptyCloud("cannot initialize splats from zero points")
    pos = np.asarray(points.positions, dtype=np.float64)
    extent = points.extent()
    if n == 1 or extent == 0.0:
        scales = np.full(n, 0.01 * max(extent, 1.0))
    else:
        k_eff = min(k, n - 1)
        tree = cKDTree(pos)
        dist, _ = tree.query(pos, k=k_eff + 1)
        scales = dist[:, 1:].mean(axis=1)
        scales = np.clip(scales, SCALE_CLAMP[0] * extent, SCALE_CLAMP[1] * extent)
    return SplatCloud(
        mu=pos,
        log_scale=np.repeat(np.log(scales)[:, None], 3, axis=1),
        quat=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        opacity_logit=np.full(n, logit(INIT_OPACITY)),
        color=np.asarray(points.colors, dtype=np.float64),
    )
