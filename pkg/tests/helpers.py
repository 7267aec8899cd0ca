"""Shared scene generators for renderer and acceptance tests."""
import numpy as np

from splatforge import scene


def random_camera(rng, w=32, h=32):
    q = rng.normal(size=4)
    pose = np.eye(4)
    pose[:3, :3] = scene.quat_to_rotmat(q)
    pose[:3, 3] = rng.normal(scale=3.0, size=3)
    f = rng.uniform(0.8, 1.6) * w
    return scene.Camera(fx=f, fy=f * rng.uniform(0.9, 1.1),
                        cx=w / 2 + rng.uniform(-2, 2), cy=h / 2 + rng.uniform(-2, 2),
                        width=w, height=h, cam_to_world=pose)


def random_cloud(rng, camera, n, z_range=(1.0, 6.0), xy_scale=0.5):
    """Splats sampled inside the camera frustum, expressed in world space."""
    z = rng.uniform(*z_range, size=n)
    x = rng.uniform(-xy_scale, xy_scale, size=n) * z * camera.width / camera.fx
    y = rng.uniform(-xy_scale, xy_scale, size=n) * z * camera.height / camera.fy
    pc = np.stack([x, y, z], axis=1)
    mu = pc @ camera.rotation.T + camera.position
    return scene.SplatCloud(
        mu=mu,
        log_scale=np.log(rng.uniform(0.02, 0.25, size=(n, 3))),
        quat=rng.normal(size=(n, 4)),
        opacity_logit=scene.logit(rng.uniform(0.05, 0.95, size=n)),
        color=rng.uniform(0.0, 1.0, size=(n, 3)),
    )


def gradcheck_camera(rng, w=8, h=8):
    """Camera for finite-difference gradient scenes.

    Mild pose jitter only; the generator below keeps all splats inside
    the view so the check exercises every parameter group.
    """
    f = rng.uniform(0.9, 1.3) * w
    pos = rng.normal(scale=2.0, size=3)
    target = pos + rng.normal(size=3) * 0.3 + np.array([0.0, 0.0, 3.0])
    return scene.Camera(fx=f, fy=f, cx=w / 2 + rng.uniform(-0.3, 0.3),
                        cy=h / 2 + rng.uniform(-0.3, 0.3), width=w, height=h,
                        cam_to_world=scene.look_at(pos, target))


def gradcheck_cloud(rng, camera, n=8):
    """Random scene conditioned to be differentiable around the base point.

    Central differences are only a valid gradient oracle where the forward
    model is smooth, so the generator keeps the scene away from its two
    non-smooth sets: depth slots are separated by more than the probe step
    can close (the z-sort never flips), and splats are large and opaque
    enough that the alpha = 1/255 cutoff ring falls outside the image (no
    pixel sits on the skip boundary). Colors, orientations, opacities and
    anisotropy stay fully random.
    """
    z = 2.0 + 0.4 * np.arange(n) + rng.uniform(0.0, 0.2, size=n)
    rng.shuffle(z)
    x = rng.uniform(-0.2, 0.2, size=n) * z * camera.width / camera.fx
    y = rng.uniform(-0.2, 0.2, size=n) * z * camera.height / camera.fy
    pc = np.stack([x, y, z], axis=1)
    mu = pc @ camera.rotation.T + camera.position
    cloud = scene.SplatCloud(
        mu=mu,
        log_scale=np.log(rng.uniform(2.2, 3.2, size=(n, 3))),
        quat=rng.normal(size=(n, 4)),
        opacity_logit=scene.logit(rng.uniform(0.3, 0.95, size=n)),
        color=rng.uniform(0.0, 1.0, size=(n, 3)),
    )
    # float64 storage so probe perturbations are applied exactly
    for name in scene.SplatCloud.PARAM_NAMES:
        setattr(cloud, name, getattr(cloud, name).astype(np.float64))
    return cloud


def oracle_carve(grid, cam):
    """Per-ray reference for visibility carving. Deliberately unbatched.

    Samples the segment from the camera (clipped to the box when outside)
    to every voxel center at one tenth of the minimum cell size, walks the
    sampled voxels in order and stops just after the first occupied one.
    The sampling definition matches carve_visibility exactly so the two
    must agree bit for bit; only the execution strategy differs.
    """
    cam = np.asarray(cam, dtype=np.float64)
    lo = grid.lo
    hi = grid.hi
    res = grid.resolution
    cell = (hi - lo) / res
    step = cell.min() / 10
    inside = bool((cam >= lo).all() and (cam <= hi).all())
    occ = grid.occupied.reshape(-1).tolist()
    seen = [False] * len(occ)
    n1, n2 = int(res[1]), int(res[2])
    for ix in range(int(res[0])):
        for iy in range(n1):
            for iz in range(n2):
                c = lo + (np.array([ix, iy, iz], dtype=np.float64) + 0.5) * cell
                if inside:
                    a = cam
                else:
                    d = c - cam
                    with np.errstate(divide="ignore", invalid="ignore"):
                        t0 = (lo - cam) / d
                        t1 = (hi - cam) / d
                    t_enter = min(max(float(np.max(np.minimum(t0, t1))), 0.0), 1.0)
                    a = cam + t_enter * d
                d = c - a
                length = np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
                n = max(2, int(np.ceil(length / step)) + 1)
                u = np.arange(n, dtype=np.float64) / (n - 1)
                p = a[None, :] + u[:, None] * d[None, :]
                idx = np.floor((p - lo) / cell).astype(np.int64)
                np.clip(idx, 0, res - 1, out=idx)
                lin = ((idx[:, 0] * n1 + idx[:, 1]) * n2 + idx[:, 2]).tolist()
                for cell_id in lin:
                    seen[cell_id] = True
                    if occ[cell_id]:
                        break
    return np.array(seen, dtype=bool).reshape(grid.occupied.shape)
