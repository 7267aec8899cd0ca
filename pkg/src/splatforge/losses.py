"""Training objectives and their analytic gradients.

Every loss returns (scalar, gradient...) pairs; gradients are float64 arrays
shaped like the differentiated input. Reductions are means over contributing
elements so the weights are resolution-independent.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInput, ShapeMismatch, ValidationError

PEARSON_GUARD = 1e-8
OPACITY_CLAMP = 1e-6
STANDARDIZE_EPS = 1e-8
PYRAMID_LEVELS = 3


@dataclass(frozen=True)
class LossWeights:
    lambda_latent: float = 0.0
    lambda_image: float = 0.0
    lambda_lpips: float = 0.0
    lambda_anchor: float = 0.0
    lambda_depth: float = 0.0
    lambda_opacity: float = 0.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {value}")


def _gauss_kernel5(sigma):
    x = np.arange(-2.0, 3.0)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(img, kernel, mode):
    out = img.astype(np.float64, copy=True)
    for axis in (0, 1):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode=mode)
    return out


def gaussian_blur(img, sigma=1.0, mode="reflect"):
    """Separable 5-tap Gaussian blur over the two leading (spatial) axes."""
    return _blur(np.asarray(img), _gauss_kernel5(sigma), mode)


def sharpen(img, amount=0.5, sigma=1.0):
    """Unsharp mask: clamp(x + amount*(x - blur(x)), 0, 1).

    Reflect padding keeps constant images exactly constant.
    """
    if amount < 0:
        raise ValidationError(f"amount must be >= 0, got {amount}")
    img = np.asarray(img)
    if amount == 0.0:
        return img.astype(np.float64, copy=True)
    out = img + amount * (img - gaussian_blur(img, sigma))
    return np.clip(out, 0.0, 1.0)


def depth_pearson_loss(d, d_hat):
    """Negated Pearson correlation between two depth maps.

    Returns (loss in [-1, 1], gradient w.r.t. d). d_hat is a constant target.
    """
    d = np.asarray(d, dtype=np.float64)
    d_hat = np.asarray(d_hat, dtype=np.float64)
    if d.shape != d_hat.shape:
        raise ShapeMismatch(f"depth {d.shape} vs target {d_hat.shape}")
    if d.size < 2:
        raise DegenerateInput(f"need at least 2 pixels, got {d.size}")
    if np.ptp(d) == 0.0 or np.ptp(d_hat) == 0.0:
        raise DegenerateInput("constant depth map has no correlation")
    a = d - d.mean()
    b = d_hat - d_hat.mean()
    p = np.sqrt(np.sum(a * a) + PEARSON_GUARD)
    q = np.sqrt(np.sum(b * b) + PEARSON_GUARD)
    s = float(np.sum(a * b))
    loss = -s / (p * q)
    grad = -b / (p * q) + s * a / (p ** 3 * q)
    return loss, grad


def sds_loss(x, x_hat, t, schedule, weight_fn=None):
    """Distillation reference objective w(t)*mean((x - x_hat)^2).

    Returns (scalar, gradient w.r.t. x); x_hat is a constant target. The
    default weight is the schedule's 1 - alpha_bar_t.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"render {x.shape} vs target {x_hat.shape}")
    w = weight_fn(t) if weight_fn is not None else schedule.sds_weight(t)
    diff = x - x_hat
    loss = w * float(np.mean(diff * diff))
    grad = (2.0 * w / diff.size) * diff
    return loss, grad


def opacity_loss(cloud):
    """Mean binary entropy of splat opacities, pushing them toward 0 or 1.

    Returns (scalar, gradient w.r.t. opacity_logit). Opacities are clamped
    to [1e-6, 1-1e-6] for evaluation; gradients vanish inside the clamp.
    """
    sig_raw = 1.0 / (1.0 + np.exp(-np.asarray(cloud.opacity_logit, dtype=np.float64)))
    sig = np.clip(sig_raw, OPACITY_CLAMP, 1.0 - OPACITY_CLAMP)
    loss = float(np.mean(-sig * np.log(sig) - (1.0 - sig) * np.log1p(-sig)))
    dloss_dsig = -np.log(sig / (1.0 - sig)) / sig.size
    live = (sig_raw > OPACITY_CLAMP) & (sig_raw < 1.0 - OPACITY_CLAMP)
    grad = dloss_dsig * sig_raw * (1.0 - sig_raw) * live
    return loss, grad


class PerceptualDistance:
    """Interface: dist(a, b) -> (scalar >= 0, gradient w.r.t. a)."""

    def dist(self, a, b):
        raise NotImplementedError


class PyramidDistance(PerceptualDistance):
    """Structure-sensitive proxy distance without learned weights.

    Mean squared difference averaged over a 3-level Gaussian pyramid of
    per-channel standardized images. Standardization makes the distance
    invariant to per-channel positive affine remaps; pyramid levels compare
    progressively coarser structure. Zero-padded blurs keep the downsample
    operator exactly self-adjoint, so the gradient is the transposed pyramid.
    """

    def __init__(self, sigma=1.0, levels=PYRAMID_LEVELS):
        self.kernel = _gauss_kernel5(sigma)
        self.levels = int(levels)

    def _down(self, img):
        return _blur(img, self.kernel, "constant")[::2, ::2]

    def _down_adjoint(self, grad, shape):
        stuffed = np.zeros(shape, dtype=np.float64)
        stuffed[::2, ::2] = grad
        return _blur(stuffed, self.kernel, "constant")

    @staticmethod
    def _standardize(img):
        mu = img.mean(axis=(0, 1), keepdims=True)
        var = img.var(axis=(0, 1), keepdims=True)
        denom = np.sqrt(var + STANDARDIZE_EPS)
        return (img - mu) / denom, denom

    def dist(self, a, b):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeMismatch(f"images disagree: {a.shape} vs {b.shape}")
        sa, denom_a = self._standardize(a)
        sb, _ = self._standardize(b)
        level_a, level_b = sa, sb
        shapes = []
        diffs = []
        total = 0.0
        for _ in range(self.levels):
            diff = level_a - level_b
            diffs.append(diff)
            shapes.append(level_a.shape)
            total += float(np.mean(diff * diff))
            level_a = self._down(level_a)
            level_b = self._down(level_b)
        loss = total / self.levels

        # adjoint pass from the coarsest level back to the standardized image
        g_sa = None
        for diff, shape in zip(reversed(diffs), reversed(shapes)):
            g_level = (2.0 / (self.levels * diff.size)) * diff
            g_sa = g_level if g_sa is None else g_level + self._down_adjoint(g_sa, shape)
        # standardization backward (layernorm form, denom = sqrt(var + eps))
        g_mean = g_sa.mean(axis=(0, 1), keepdims=True)
        g_proj = (g_sa * sa).mean(axis=(0, 1), keepdims=True)
        grad = (g_sa - g_mean - sa * g_proj) / denom_a
        return loss, grad


_DEFAULT_DISTANCE = PyramidDistance()


def resample_mask_to(mask, shape):
    """Area-average a {0,1} mask onto a coarser grid, threshold at 0.5.

    Ties (exactly half known) land on the known side. The coarse grid must
    tile the mask evenly.
    """
    mask = np.asarray(mask, dtype=np.float64)
    h, w = shape
    if mask.shape == (h, w):
        return (mask >= 0.5).astype(np.float64)
    if mask.shape[0] % h or mask.shape[1] % w:
        raise ShapeMismatch(
            f"mask {mask.shape} does not tile latent grid {(h, w)}")
    fy, fx = mask.shape[0] // h, mask.shape[1] // w
    avg = mask.reshape(h, fy, w, fx).mean(axis=(1, 3))
    return (avg >= 0.5).astype(np.float64)


def inpaint_loss(z, z_hat, x, x_hat, i_pc, m_occl, weights, perceptual=None):
    """Combined distillation objective for the inpainting stage.

    L = lambda_latent * mean of (z - z_hat)^2 over latent cells whose
        resampled mask is 0 (the region being filled in)
      + lambda_image * mean((x - x_hat)^2)
      + lambda_lpips * perceptual.dist(x, x_hat)
      + lambda_anchor * mean of (x - i_pc)^2 over mask-1 pixels

    z_hat / x_hat / i_pc are constant targets; m_occl is a {0,1} map where 1
    marks pixels whose appearance is already known. Returns
    (scalar, gradient w.r.t. z, gradient w.r.t. x).
    """
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    i_pc = np.asarray(i_pc, dtype=np.float64)
    m_occl = np.asarray(m_occl, dtype=np.float64)
    if z.shape != z_hat.shape:
        raise ShapeMismatch(f"latent {z.shape} vs target {z_hat.shape}")
    if not (x.shape == x_hat.shape == i_pc.shape):
        raise ShapeMismatch(
            f"image buffers disagree: {x.shape} {x_hat.shape} {i_pc.shape}")
    if m_occl.shape != x.shape[:2]:
        raise ShapeMismatch(f"mask {m_occl.shape} vs image {x.shape[:2]}")
    if perceptual is None:
        perceptual = _DEFAULT_DISTANCE

    loss = 0.0
    g_z = np.zeros_like(z)
    g_x = np.zeros_like(x)

    if weights.lambda_latent != 0.0:
        m_lat = resample_mask_to(m_occl, z.shape[:2])
        fill = (m_lat == 0.0)
        count = int(fill.sum()) * int(np.prod(z.shape[2:], dtype=int))
        if count:
            diff = (z - z_hat) * fill[(...,) + (None,) * (z.ndim - 2)]
            loss += weights.lambda_latent * float(np.sum(diff * diff)) / count
            g_z += (2.0 * weights.lambda_latent / count) * diff

    if weights.lambda_image != 0.0:
        diff = x - x_hat
        loss += weights.lambda_image * float(np.mean(diff * diff))
        g_x += (2.0 * weights.lambda_image / diff.size) * diff

    if weights.lambda_lpips != 0.0:
        d, g = perceptual.dist(x, x_hat)
        loss += weights.lambda_lpips * d
        g_x += weights.lambda_lpips * g

    if weights.lambda_anchor != 0.0:
        known = m_occl[..., None]
        count = int((m_occl > 0).sum()) * x.shape[2]
        if count:
            diff = known * (x - i_pc)
            loss += weights.lambda_anchor * float(np.sum(diff * diff)) / count
            g_x += (2.0 * weights.lambda_anchor / count) * known * diff

    return loss, g_z, g_x
