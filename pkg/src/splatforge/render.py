"""Differentiable CPU rasterizer for 3D Gaussian splats.

Forward model, per pixel p with splats sorted front to back by camera z:

    C(p) = sum_i c_i * a_i(p) * prod_{j<i} (1 - a_j(p))
    a_i(p) = min(0.99, o_i * exp(-0.5 * d^T S'^-1 d)),   d = p - mean2d_i

with a_i < 1/255 treated as zero contribution (no attenuation either). The 2D
covariance S' is the EWA projection J W S W^T J^T of the 3D covariance plus a
0.3 px^2 isotropic dilation. Depth output is the alpha-weighted mean of
camera-space z, normalized by accumulated alpha where that exceeds 1e-4 and 0
(invalid) elsewhere.

render() tiles the image and culls by a conservative screen-space radius
chosen so that every culled contribution sits below the 1/255 alpha skip,
which keeps it numerically identical to render_bruteforce() (the dense oracle:
every splat against every pixel, no bbox or tile shortcuts).
render_gradients() is the hand-derived reverse pass through compositing, the
alpha clamps, the EWA projection, and quaternion normalization;
finite-difference tests pin it.

All math runs in float64 internally; outputs are float32 buffers.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .errors import DegenerateCovariance, EmptyCloud, ShapeMismatch
from .scene import Z_EPS, Camera, SplatCloud, quats_to_rotmats

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
DILATION = 0.3
DEPTH_ALPHA_MIN = 1e-4
TILE = 16
# Beyond this many standard deviations the clamped alpha is provably under
# ALPHA_SKIP (0.99 * exp(-3.5^2/2) ~ 0.0022 < 1/255), so bbox culling never
# removes a contributing splat.
RADIUS_SIGMA = 3.5


@dataclasses.dataclass
class RenderOutput:
    color: np.ndarray  # (H,W,3) f32
    depth: np.ndarray  # (H,W) f32, 0 where accumulated alpha <= 1e-4
    alpha: np.ndarray  # (H,W) f32


@dataclasses.dataclass
class RenderGrads:
    """d(loss)/d(storage parameters), row-aligned with the input cloud."""

    mu: np.ndarray             # (N,3)
    log_scale: np.ndarray      # (N,3)
    quat: np.ndarray           # (N,4)
    opacity_logit: np.ndarray  # (N,)
    color: np.ndarray          # (N,3)


@dataclasses.dataclass
class _Projected:
    """Depth-sorted per-splat screen-space quantities for the surviving set."""

    idx: np.ndarray      # indices into the original cloud
    mean2d: np.ndarray   # (M,2)
    cov2d: np.ndarray    # (M,2,2) after dilation
    cov_inv: np.ndarray  # (M,2,2)
    z: np.ndarray        # (M,)
    color: np.ndarray    # (M,3)
    mu_cam: np.ndarray   # (M,3)
    jac: np.ndarray      # (M,2,3)
    t2: np.ndarray       # (M,2,3) J @ R_wc
    rot: np.ndarray      # (M,3,3) normalized-quat rotation
    qn: np.ndarray       # (M,4) normalized quats
    qnorm: np.ndarray    # (M,)
    scale: np.ndarray    # (M,3) linear-space
    sig: np.ndarray      # (M,) sigmoid opacity (pre pixel clamp)
    bbox: np.ndarray     # (M,4) umin, umax, vmin, vmax


def _project_cloud(cloud: SplatCloud, camera: Camera, screen_cull=True):
    """EWA-project the cloud; cull behind-camera splats, optionally off-screen ones."""
    if len(cloud) == 0:
        raise EmptyCloud("render of an empty splat cloud")
    mu = cloud.mu.astype(np.float64)
    rot_c2w = camera.rotation
    mu_cam_all = (mu - camera.position) @ rot_c2w
    in_front = mu_cam_all[:, 2] > Z_EPS
    keep = np.nonzero(in_front)[0]
    if len(keep) == 0:
        return None

    q = cloud.quat.astype(np.float64)[keep]
    qnorm = np.linalg.norm(q, axis=1)
    scale = np.exp(cloud.log_scale.astype(np.float64))[keep]
    sig = 1.0 / (1.0 + np.exp(-cloud.opacity_logit.astype(np.float64)))[keep]
    mu_cam = mu_cam_all[keep]
    rot = quats_to_rotmats(q)

    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    jac = np.zeros((len(keep), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / z ** 2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / z ** 2

    t2 = np.einsum("nij,jk->nik", jac, rot_c2w.T)
    n_mat = rot * scale[:, None, :]
    sigma3 = np.einsum("nij,nkj->nik", n_mat, n_mat)
    cov2d = np.einsum("nij,njk,nlk->nil", t2, sigma3, t2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    if not np.all(np.isfinite(det)) or np.any(det <= 0):
        raise DegenerateCovariance("projected covariance singular or non-finite")
    cov_inv = np.empty_like(cov2d)
    cov_inv[:, 0, 0] = cov2d[:, 1, 1] / det
    cov_inv[:, 1, 1] = cov2d[:, 0, 0] / det
    cov_inv[:, 0, 1] = -cov2d[:, 0, 1] / det
    cov_inv[:, 1, 0] = -cov2d[:, 1, 0] / det

    mean2d = np.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], axis=1)
    rx = RADIUS_SIGMA * np.sqrt(cov2d[:, 0, 0])
    ry = RADIUS_SIGMA * np.sqrt(cov2d[:, 1, 1])
    bbox = np.stack([mean2d[:, 0] - rx, mean2d[:, 0] + rx,
                     mean2d[:, 1] - ry, mean2d[:, 1] + ry], axis=1)

    if screen_cull:
        on_screen = ((bbox[:, 1] >= 0) & (bbox[:, 0] <= camera.width)
                     & (bbox[:, 3] >= 0) & (bbox[:, 2] <= camera.height))
        sel = np.nonzero(on_screen)[0]
        if len(sel) == 0:
            return None
    else:
        sel = np.arange(len(keep))

    order = sel[np.argsort(z[sel], kind="stable")]
    return _Projected(
        idx=keep[order], mean2d=mean2d[order], cov2d=cov2d[order],
        cov_inv=cov_inv[order], z=z[order],
        color=cloud.color.astype(np.float64)[keep][order],
        mu_cam=mu_cam[order], jac=jac[order], t2=t2[order], rot=rot[order],
        qn=(q / qnorm[:, None])[order], qnorm=qnorm[order], scale=scale[order],
        sig=sig[order], bbox=bbox[order])


def _tile_alphas(proj, cand, centers):
    """Per-pixel alphas for candidate splats: (alpha (P,K), delta (P,K,2), g (P,K))."""
    delta = centers[:, None, :] - proj.mean2d[None, cand, :]
    minv = proj.cov_inv[cand]
    power = -0.5 * (minv[None, :, 0, 0] * delta[..., 0] ** 2
                    + 2.0 * minv[None, :, 0, 1] * delta[..., 0] * delta[..., 1]
                    + minv[None, :, 1, 1] * delta[..., 1] ** 2)
    g = np.exp(power)
    alpha = proj.sig[None, cand] * g
    np.minimum(alpha, ALPHA_CLAMP, out=alpha)
    alpha[alpha < ALPHA_SKIP] = 0.0
    return alpha, delta, g


def _composite(alpha, colors, z):
    """Front-to-back compositing along the K axis.

    Returns color (P,3), accumulated alpha (P,), depth numerator (P,),
    transmittance before each splat T (P,K), weights w (P,K).
    """
    t = np.cumprod(1.0 - alpha, axis=1)
    t = np.concatenate([np.ones((alpha.shape[0], 1)), t[:, :-1]], axis=1)
    w = alpha * t
    return w @ colors, w.sum(axis=1), w @ z, t, w


def _tile_ranges(size, tile):
    return [(lo, min(lo + tile, size)) for lo in range(0, size, tile)]


def _pixel_centers(x0, x1, y0, y1):
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _finish(color, acc, znum, h, w, dtype):
    valid = acc > DEPTH_ALPHA_MIN
    depth = np.where(valid, znum / np.where(valid, acc, 1.0), 0.0)
    return RenderOutput(color.reshape(h, w, 3).astype(dtype),
                        depth.reshape(h, w).astype(dtype),
                        acc.reshape(h, w).astype(dtype))


def render(cloud: SplatCloud, camera: Camera, dtype=np.float32) -> RenderOutput:
    """Tiled forward rasterization.

    dtype controls the output cast only (finite-difference harnesses pass
    float64 to probe the underlying math); internals are always float64.
    """
    proj = _project_cloud(cloud, camera)
    h, w = camera.height, camera.width
    color = np.zeros((h * w, 3))
    acc = np.zeros(h * w)
    znum = np.zeros(h * w)
    if proj is None:
        return _finish(color, acc, znum, h, w, dtype)

    flat = np.arange(h * w).reshape(h, w)
    for y0, y1 in _tile_ranges(h, TILE):
        for x0, x1 in _tile_ranges(w, TILE):
            cand = np.nonzero((proj.bbox[:, 1] >= x0) & (proj.bbox[:, 0] <= x1)
                              & (proj.bbox[:, 3] >= y0) & (proj.bbox[:, 2] <= y1))[0]
            if len(cand) == 0:
                continue
            centers = _pixel_centers(x0, x1, y0, y1)
            alpha, _, _ = _tile_alphas(proj, cand, centers)
            c, a, zn, _, _ = _composite(alpha, proj.color[cand], proj.z[cand])
            sel = flat[y0:y1, x0:x1].ravel()
            color[sel] = c
            acc[sel] = a
            znum[sel] = zn
    return _finish(color, acc, znum, h, w, dtype)


def render_bruteforce(cloud: SplatCloud, camera: Camera, dtype=np.float32) -> RenderOutput:
    """Dense oracle: every splat against every pixel, full sort, no culling or
    tiling shortcuts beyond the alpha clamps of the forward model itself.
    Behind-camera splats are outside the projection's domain and are skipped
    exactly as in render().
    """
    proj = _project_cloud(cloud, camera, screen_cull=False)
    h, w = camera.height, camera.width
    if proj is None:
        return _finish(np.zeros((h * w, 3)), np.zeros(h * w), np.zeros(h * w), h, w, dtype)
    centers = _pixel_centers(0, w, 0, h)
    alpha, _, _ = _tile_alphas(proj, np.arange(len(proj.z)), centers)
    c, a, zn, _, _ = _composite(alpha, proj.color, proj.z)
    return _finish(c, a, zn, h, w, dtype)


def _quat_rot_grads(qn):
    """d(R)/d(qn): (M,4,3,3) for normalized wxyz quaternions."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    m = len(qn)
    zero = np.zeros(m)
    dr = np.empty((m, 4, 3, 3))
    dr[:, 0] = 2.0 * np.stack([
        np.stack([zero, -z, y], axis=1),
        np.stack([z, zero, -x], axis=1),
        np.stack([-y, x, zero], axis=1)], axis=1)
    dr[:, 1] = 2.0 * np.stack([
        np.stack([zero, y, z], axis=1),
        np.stack([y, -2 * x, -w], axis=1),
        np.stack([z, w, -2 * x], axis=1)], axis=1)
    dr[:, 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], axis=1),
        np.stack([x, zero, z], axis=1),
        np.stack([-w, z, -2 * y], axis=1)], axis=1)
    dr[:, 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], axis=1),
        np.stack([w, -2 * z, y], axis=1),
        np.stack([x, y, zero], axis=1)], axis=1)
    return dr


def render_gradients(cloud: SplatCloud, camera: Camera, upstream_color,
                     upstream_depth=None, upstream_alpha=None) -> RenderGrads:
    """Reverse pass. upstream_color is d(loss)/d(color) (H,W,3); upstream_depth
    and upstream_alpha are optional (H,W) maps. Culled splats get zero grads.
    """
    upstream_color = np.asarray(upstream_color, dtype=np.float64)
    h, w = camera.height, camera.width
    if upstream_color.shape != (h, w, 3):
        raise ShapeMismatch(f"upstream color must be {(h, w, 3)}")
    if upstream_depth is not None:
        upstream_depth = np.asarray(upstream_depth, dtype=np.float64)
        if upstream_depth.shape != (h, w):
            raise ShapeMismatch(f"upstream depth must be {(h, w)}")
    if upstream_alpha is not None:
        upstream_alpha = np.asarray(upstream_alpha, dtype=np.float64)
        if upstream_alpha.shape != (h, w):
            raise ShapeMismatch(f"upstream alpha must be {(h, w)}")

    n = len(cloud)
    out = RenderGrads(mu=np.zeros((n, 3)), log_scale=np.zeros((n, 3)),
                      quat=np.zeros((n, 4)), opacity_logit=np.zeros(n),
                      color=np.zeros((n, 3)))
    proj = _project_cloud(cloud, camera)
    if proj is None:
        return out
    m = len(proj.z)

    # accumulators over pixels, in sorted-splat space
    g_mean2d = np.zeros((m, 2))
    g_minv = np.zeros((m, 2, 2))
    g_z = np.zeros(m)
    g_sig = np.zeros(m)
    g_color = np.zeros((m, 3))

    for y0, y1 in _tile_ranges(h, TILE):
        for x0, x1 in _tile_ranges(w, TILE):
            cand = np.nonzero((proj.bbox[:, 1] >= x0) & (proj.bbox[:, 0] <= x1)
                              & (proj.bbox[:, 3] >= y0) & (proj.bbox[:, 2] <= y1))[0]
            if len(cand) == 0:
                continue
            centers = _pixel_centers(x0, x1, y0, y1)
            alpha, delta, g = _tile_alphas(proj, cand, centers)
            colors = proj.color[cand]
            z = proj.z[cand]
            _, a_acc, znum, t, wgt = _composite(alpha, colors, z)

            u_c = upstream_color[y0:y1, x0:x1].reshape(-1, 3)
            g_color[cand] += wgt.T @ u_c

            one_minus = 1.0 - alpha
            # suffix sums over j > k (exclusive), per pixel
            wc = wgt[..., None] * colors[None, :, :]
            suf_c = np.flip(np.cumsum(np.flip(wc, 1), axis=1), 1) - wc
            suf_a = np.flip(np.cumsum(np.flip(wgt, 1), axis=1), 1) - wgt

            # dC/da_k = T_k c_k - suffix_k / (1 - a_k)
            d_alpha = (np.einsum("pc,kc->pk", u_c, colors) * t
                       - np.einsum("pc,pkc->pk", u_c, suf_c) / one_minus)
            if upstream_alpha is not None:
                u_a = upstream_alpha[y0:y1, x0:x1].reshape(-1)
                d_alpha += u_a[:, None] * (t - suf_a / one_minus)
            if upstream_depth is not None:
                u_d = upstream_depth[y0:y1, x0:x1].reshape(-1)
                wz = wgt * z[None, :]
                suf_z = np.flip(np.cumsum(np.flip(wz, 1), axis=1), 1) - wz
                valid = a_acc > DEPTH_ALPHA_MIN
                asafe = np.where(valid, a_acc, 1.0)
                dep = np.where(valid, znum / asafe, 0.0)
                scale_d = np.where(valid, u_d / asafe, 0.0)
                d_alpha += scale_d[:, None] * (
                    t * (z[None, :] - dep[:, None])
                    - (suf_z - dep[:, None] * suf_a) / one_minus)
                g_z[cand] += wgt.T @ scale_d

            # clamped (a = 0.99) and skipped (a = 0) pixels are flat in params
            live = (alpha > 0.0) & (alpha < ALPHA_CLAMP)
            da = np.where(live, d_alpha, 0.0)
            g_sig[cand] += (da * g).sum(axis=0)
            dpower = da * proj.sig[None, cand] * g

            minv = proj.cov_inv[cand]
            mdx = minv[None, :, 0, 0] * delta[..., 0] + minv[None, :, 0, 1] * delta[..., 1]
            mdy = minv[None, :, 1, 0] * delta[..., 0] + minv[None, :, 1, 1] * delta[..., 1]
            # power = -1/2 d^T M d with d = p - mean: d(power)/d(mean) = +M d
            g_mean2d[cand, 0] += (dpower * mdx).sum(axis=0)
            g_mean2d[cand, 1] += (dpower * mdy).sum(axis=0)
            # d(power)/d(M_ij) = -1/2 d_i d_j (full 2x2, off-diagonals equal)
            g_minv[cand, 0, 0] += (-0.5 * dpower * delta[..., 0] ** 2).sum(axis=0)
            g_minv[cand, 1, 1] += (-0.5 * dpower * delta[..., 1] ** 2).sum(axis=0)
            off = (-0.5 * dpower * delta[..., 0] * delta[..., 1]).sum(axis=0)
            g_minv[cand, 0, 1] += off
            g_minv[cand, 1, 0] += off

    # ---- chain screen-space grads back to storage parameters ----
    # Minv = inv(cov2d): dL/dcov2d = -Minv^T dL/dMinv Minv^T (Minv symmetric)
    g_cov2d = -np.einsum("nij,njk,nkl->nil", proj.cov_inv, g_minv, proj.cov_inv)

    n_mat = proj.rot * proj.scale[:, None, :]
    sigma3 = np.einsum("nij,nkj->nik", n_mat, n_mat)
    gpgt = g_cov2d + np.transpose(g_cov2d, (0, 2, 1))
    g_t2 = np.einsum("nij,njk,nkl->nil", gpgt, proj.t2, sigma3)
    g_sigma3 = np.einsum("nji,njk,nkl->nil", proj.t2, g_cov2d, proj.t2)

    r_wc = camera.rotation.T
    g_jac = np.einsum("nij,kj->nik", g_t2, r_wc)  # t2 = J @ r_wc

    x, y, z = proj.mu_cam[:, 0], proj.mu_cam[:, 1], proj.mu_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    g_mu_cam = np.einsum("nij,ni->nj", proj.jac, g_mean2d)  # mean2d Jacobian is J
    g_mu_cam[:, 2] += g_z
    # J's own dependence on the camera-space mean
    g_mu_cam[:, 0] += g_jac[:, 0, 2] * (-fx / z ** 2)
    g_mu_cam[:, 1] += g_jac[:, 1, 2] * (-fy / z ** 2)
    g_mu_cam[:, 2] += (g_jac[:, 0, 0] * (-fx / z ** 2)
                       + g_jac[:, 1, 1] * (-fy / z ** 2)
                       + g_jac[:, 0, 2] * (2 * fx * x / z ** 3)
                       + g_jac[:, 1, 2] * (2 * fy * y / z ** 3))
    g_mu_world = g_mu_cam @ camera.rotation.T  # mu_cam = R^T (mu - t)

    # sigma3 = N N^T with N = R diag(s)
    g3 = g_sigma3 + np.transpose(g_sigma3, (0, 2, 1))
    g_n = np.einsum("nij,njk->nik", g3, n_mat)
    g_scale = np.einsum("nij,nij->nj", proj.rot, g_n)
    g_log_scale = g_scale * proj.scale
    g_rot = g_n * proj.scale[:, None, :]

    dr_dq = _quat_rot_grads(proj.qn)
    g_qn = np.einsum("naij,nij->na", dr_dq, g_rot)
    g_q = (g_qn - proj.qn * np.einsum("na,na->n", proj.qn, g_qn)[:, None]) \
        / proj.qnorm[:, None]

    g_logit = g_sig * proj.sig * (1.0 - proj.sig)

    out.mu[proj.idx] = g_mu_world
    out.log_scale[proj.idx] = g_log_scale
    out.quat[proj.idx] = g_q
    out.opacity_logit[proj.idx] = g_logit
    out.color[proj.idx] = g_color
    return out


def rasterize_points(positions, values, camera: Camera):
    """Z-buffer render of 1-pixel points.

    values is (N,C); returns (buf (H,W,C), depth (H,W), hit (H,W) bool,
    winner (H,W) int64 index into positions, -1 where no hit).
    Nearest z wins; exact ties resolve to the lowest point index.
    """
    from .scene import project_points

    positions = np.asarray(positions, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    h, w = camera.height, camera.width
    buf = np.zeros((h, w, values.shape[1]))
    depth = np.zeros((h, w))
    winner = np.full((h, w), -1, dtype=np.int64)
    if len(positions) == 0:
        return buf, depth, winner >= 0, winner

    uv, z, valid = project_points(camera, positions)
    ix = np.floor(uv[:, 0]).astype(np.int64)
    iy = np.floor(uv[:, 1]).astype(np.int64)
    ok = valid & (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return buf, depth, winner >= 0, winner

    flat = iy[idx] * w + ix[idx]
    # sort by (pixel, z, index); first row per pixel is the z-buffer winner
    order = np.lexsort((idx, z[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win_rows = order[first]
    pix = flat[win_rows]
    pts = idx[win_rows]
    buf.reshape(-1, values.shape[1])[pix] = values[pts]
    depth.reshape(-1)[pix] = z[pts]
    winner.reshape(-1)[pix] = pts
    return buf, depth, winner >= 0, winner
