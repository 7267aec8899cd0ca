"""Voxel visibility carving and inpainting-mask rendering.

The occlusion volume is the set of voxels the reference camera cannot see:
build an occupancy grid from the point cloud, trace a line from the camera
to every voxel center, and mark voxels seen until a ray hits occupancy.
Whatever stays unmarked must be hallucinated by the inpainting model, so
those voxel centers join the point cloud and drive the per-view masks.
"""
import struct

import numpy as np
from scipy import ndimage

from .errors import EmptyCloud, MalformedGrid, ValidationError
from .render import rasterize_points
from .scene import TAG_OCCLUSION, Camera, PointCloud

INFLATE = 1.05           # grid aabb relative to the point bounds
SUPERSAMPLE = 10         # ray samples per minimum cell size
DEFAULT_RESOLUTION = 128
OCCLUSION_GRAY = 0.5
MASK_DILATE_REF = 8      # pixels at the reference resolution below
MASK_DILATE_RES = 512
CHUNK_TARGETS = 1024

GRID_MAGIC = b"OGRD"
GRID_VERSION = 1


def _as_resolution(resolution):
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
    if (res < 2).any():
        raise ValidationError(f"grid resolution must be >= 2 per axis: {res}")
    return res


class OccupancyGrid:
    """Axis-aligned voxel grid with occupied and seen flags per voxel.

    Flag arrays are (nx, ny, nz) bools indexed by voxel integer coordinates;
    world position maps to a voxel by flooring (p - lo) / cell_size, clamped
    to the grid. Carving only ever sets seen flags, never clears them.
    """

    def __init__(self, lo, hi, resolution):
        self.lo = np.asarray(lo, dtype=np.float64).reshape(3).copy()
        self.hi = np.asarray(hi, dtype=np.float64).reshape(3).copy()
        if not (np.isfinite(self.lo).all() and np.isfinite(self.hi).all()):
            raise ValidationError("grid bounds must be finite")
        if (self.hi <= self.lo).any():
            raise ValidationError("grid upper corner must exceed lower corner")
        self.resolution = _as_resolution(resolution)
        self.cell_size = (self.hi - self.lo) / self.resolution
        shape = tuple(int(r) for r in self.resolution)
        self.occupied = np.zeros(shape, dtype=bool)
        self.seen = np.zeros(shape, dtype=bool)

    def voxel_of(self, points):
        """Integer voxel coordinates per point, clamped to the grid."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = np.floor((pts - self.lo) / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, self.resolution - 1)

    def centers(self, idx):
        """World-space centers of the given integer voxel coordinates."""
        return self.lo + (np.asarray(idx, dtype=np.float64) + 0.5) * self.cell_size

    def all_centers(self):
        grids = np.meshgrid(*(np.arange(r) for r in self.resolution),
                            indexing="ij")
        idx = np.stack([g.reshape(-1) for g in grids], axis=1)
        return idx, self.centers(idx)


def build_grid(points: PointCloud, resolution=DEFAULT_RESOLUTION):
    """Occupancy grid over the point bounds, inflated 5 percent.

    A voxel is occupied iff at least one point falls inside it; every voxel
    starts unseen, so an uncarved grid treats the whole scene as occluded.
    """
    if len(points) == 0:
        raise EmptyCloud("occupancy grid needs at least one point")
    pos = points.positions.astype(np.float64)
    p_lo = pos.min(axis=0)
    p_hi = pos.max(axis=0)
    span = p_hi - p_lo
    pad = np.where(span > 0, 0.5 * (INFLATE - 1.0) * span, 1e-3)
    grid = OccupancyGrid(p_lo - pad, p_hi + pad, resolution)
    idx = grid.voxel_of(pos)
    grid.occupied[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return grid


def _segment_entries(cam, targets, lo, hi):
    """Entry points where segments cam->target cross into the [lo, hi] box.

    Targets are interior, so each segment enters exactly once; a camera
    already inside the box starts at the camera. Standard slab test.
    """
    d = targets - cam
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - cam) / d
        t1 = (hi - cam) / d
    t_axis = np.minimum(t0, t1)
    t_enter = np.clip(np.max(t_axis, axis=1), 0.0, 1.0)
    return cam + t_enter[:, None] * d


def carve_visibility(grid: OccupancyGrid, camera_center):
    """Mark every voxel some camera ray reaches before hitting occupancy.

    For each voxel center, samples the segment from the camera (clipped to
    the grid if the camera is outside) at SUPERSAMPLE points per minimum
    cell size and walks the sampled voxels in order, marking them seen and
    stopping just after the first occupied one: the surface a ray lands on
    is visible, everything behind it is not. Marking is idempotent and
    monotone, so target order cannot affect the result. Returns the grid.
    """
    cam = np.asarray(camera_center, dtype=np.float64).reshape(3)
    if not np.isfinite(cam).all():
        raise ValidationError("camera center must be finite")
    _, targets = grid.all_centers()
    inside = bool((cam >= grid.lo).all() and (cam <= grid.hi).all())
    step = grid.cell_size.min() / SUPERSAMPLE
    res = grid.resolution
    occ_flat = grid.occupied.reshape(-1)
    seen_flat = grid.seen.reshape(-1)

    for start in range(0, len(targets), CHUNK_TARGETS):
        c = targets[start:start + CHUNK_TARGETS]
        a = np.broadcast_to(cam, c.shape) if inside \
            else _segment_entries(cam, c, grid.lo, grid.hi)
        d = c - a
        length = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
                         + d[:, 2] * d[:, 2])
        n = np.maximum(2, np.ceil(length / step).astype(np.int64) + 1)
        n_max = int(n.max())
        u = np.arange(n_max, dtype=np.float64)[None, :] / (n - 1)[:, None]
        u = np.minimum(u, 1.0)
        p = a[:, None, :] + u[:, :, None] * d[:, None, :]
        idx = np.floor((p - grid.lo) / grid.cell_size).astype(np.int64)
        np.clip(idx, 0, res - 1, out=idx)
        lin = (idx[..., 0] * res[1] + idx[..., 1]) * res[2] + idx[..., 2]
        occ_s = occ_flat[lin]
        has_occ = occ_s.any(axis=1)
        first = np.argmax(occ_s, axis=1)
        stop = np.where(has_occ, first, n_max - 1)
        keep = np.arange(n_max)[None, :] <= stop[:, None]
        seen_flat[lin[keep]] = True
    return grid


def occlusion_volume(grid: OccupancyGrid):
    """Centers of unseen voxels as mid-gray points tagged TAG_OCCLUSION."""
    idx = np.stack(np.nonzero(~grid.seen), axis=1)
    centers = grid.centers(idx) if len(idx) else np.zeros((0, 3))
    colors = np.full((len(idx), 3), OCCLUSION_GRAY)
    tags = np.full(len(idx), TAG_OCCLUSION, dtype=np.int32)
    return PointCloud(centers, colors, tags)


def default_dilation(camera: Camera):
    """Mask dilation in pixels, proportional to the render resolution."""
    scale = min(camera.width, camera.height) / MASK_DILATE_RES
    return max(1, round(MASK_DILATE_REF * scale))


def render_inpaint_mask(points: PointCloud, occl: PointCloud, camera: Camera,
                        dilation_px=None):
    """Binary map of which pixels the current scene actually explains.

    Z-buffer renders the union of scene points and occlusion-volume points.
    A pixel is 1 only when its nearest hit is a scene point: pixels landing
    on the occlusion volume are unknown even if scene points lie behind
    them, and pixels hitting nothing are unknown background. The 1-region
    is then eroded by dilation_px so the inpainting model gets a margin
    around every hole; the image border does not erode.
    """
    if dilation_px is None:
        dilation_px = default_dilation(camera)
    dilation_px = int(dilation_px)
    if dilation_px < 0:
        raise ValidationError(f"dilation must be >= 0, got {dilation_px}")
    positions = np.concatenate([points.positions, occl.positions])
    n_scene = len(points.positions)
    _, _, hit, winner = rasterize_points(
        positions, np.zeros((len(positions), 1)), camera)
    mask = hit & (winner < n_scene)
    if dilation_px > 0:
        size = 2 * dilation_px + 1
        mask = ndimage.binary_erosion(
            mask, structure=np.ones((size, size), dtype=bool), border_value=1)
    return mask.astype(np.float32)


def save_grid(path, grid: OccupancyGrid):
    """Write a grid as a little-endian header plus two packed bitsets."""
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", GRID_VERSION))
        fh.write(struct.pack("<3I", *(int(r) for r in grid.resolution)))
        fh.write(struct.pack("<6d", *grid.lo, *grid.hi))
        fh.write(np.packbits(grid.occupied.reshape(-1),
                             bitorder="little").tobytes())
        fh.write(np.packbits(grid.seen.reshape(-1),
                             bitorder="little").tobytes())


def load_grid(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize("<4sI3I6d")
    if len(raw) < head:
        raise MalformedGrid(f"file too short for header: {len(raw)} bytes")
    magic, version, nx, ny, nz, *bounds = struct.unpack_from("<4sI3I6d", raw)
    if magic != GRID_MAGIC:
        raise MalformedGrid(f"bad magic {magic!r}")
    if version != GRID_VERSION:
        raise MalformedGrid(f"unsupported version {version}")
    lo, hi = np.array(bounds[:3]), np.array(bounds[3:])
    try:
        grid = OccupancyGrid(lo, hi, (nx, ny, nz))
    except ValidationError as exc:
        raise MalformedGrid(str(exc)) from exc
    n_cells = int(nx * ny * nz)
    n_bytes = (n_cells + 7) // 8
    if len(raw) != head + 2 * n_bytes:
        raise MalformedGrid(
            f"expected {head + 2 * n_bytes} bytes for {nx}x{ny}x{nz}, "
            f"got {len(raw)}")
    shape = grid.occupied.shape
    occ = np.unpackbits(np.frombuffer(raw, np.uint8, n_bytes, head),
                        count=n_cells, bitorder="little")
    seen = np.unpackbits(np.frombuffer(raw, np.uint8, n_bytes, head + n_bytes),
                         count=n_cells, bitorder="little")
    grid.occupied = occ.astype(bool).reshape(shape)
    grid.seen = seen.astype(bool).reshape(shape)
    return grid
