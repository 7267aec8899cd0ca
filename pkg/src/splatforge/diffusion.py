"""Noise schedules, DDIM stepping and inversion, classifier-free guidance.

Denoisers and latent codecs are pluggable: anything with the duck-typed
`predict` / `encode` / `decode` methods documented on the interface classes
below works, whether in-process (mocks) or remote (wire clients). All array
math runs in float64 and results are cast back to the widest input dtype.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (NaNDetected, ShapeMismatch, TimestepOrder,
                     TimestepOutOfRange, ValidationError)

DEFAULT_T = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


class NoiseSchedule:
    """Scaled-linear beta schedule with an inclusive alpha-bar table.

    `alpha_bar` has T+1 entries so integer timesteps run 0..T with
    alpha_bar[0] = 1 (t=0 is the identity noise level).
    """

    def __init__(self, T=DEFAULT_T, beta_start=DEFAULT_BETA_START,
                 beta_end=DEFAULT_BETA_END):
        if T < 1:
            raise ValidationError(f"schedule needs at least one step, got T={T}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValidationError(
                f"beta range ({beta_start}, {beta_end}) outside (0, 1)")
        self.T = int(T)
        self.betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T,
                                 dtype=np.float64) ** 2
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.concatenate(
            [[1.0], np.cumprod(self.alphas)]).astype(np.float64)

    def check_timestep(self, t):
        if not (0 <= int(t) <= self.T) or int(t) != t:
            raise TimestepOutOfRange(f"timestep {t} outside [0, {self.T}]")
        return int(t)

    def sigma(self, t):
        """Noise std at t: sqrt(1 - alpha_bar_t)."""
        return float(np.sqrt(1.0 - self.alpha_bar[self.check_timestep(t)]))

    def sds_weight(self, t):
        """Default distillation weight w(t) = 1 - alpha_bar_t."""
        return float(1.0 - self.alpha_bar[self.check_timestep(t)])

    def t_from_fraction(self, frac):
        """Map a continuous fraction in [0, 1] to an integer timestep."""
        if not (0.0 <= frac <= 1.0):
            raise TimestepOutOfRange(f"fraction {frac} outside [0, 1]")
        return int(round(frac * (self.T - 1)))


@dataclass(frozen=True)
class GuidanceConfig:
    """Image / text guidance weights for classifier-free guidance."""
    image: float
    text: float

    def __post_init__(self):
        if not (np.isfinite(self.image) and np.isfinite(self.text)):
            raise ValidationError("guidance weights must be finite")
        if self.image < 0 or self.text < 0:
            raise ValidationError("guidance weights must be >= 0")


@dataclass(frozen=True)
class Conditioning:
    """What a denoiser sees besides the latent: prompt, and optionally a
    conditioning image with its known-region mask."""
    prompt: str = ""
    image: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None

    def drop_text(self):
        return Conditioning(prompt="", image=self.image, mask=self.mask)


UNCONDITIONED = Conditioning()


class Denoiser:
    """Interface: predict(z_t, t, cond) -> noise estimate, same shape as z_t.

    Implementations must be deterministic for identical inputs. Ones that
    depend on the camera additionally expose set_view(camera); the trainer
    calls it before predictions for that view.
    """

    def predict(self, z_t, t, cond):
        raise NotImplementedError


class LatentCodec:
    """Interface: encode(image) -> latent, decode(latent) -> image."""

    def encode(self, image):
        raise NotImplementedError

    def decode(self, latent):
        raise NotImplementedError

    def encode_vjp(self, image, grad_latent):
        """Pull a latent-space gradient back to image space, or None.

        Codecs that cannot differentiate encode (remote ones) return None;
        callers must then drop the latent gradient rather than guess.
        """
        return None


def add_noise(z, t, eps, schedule):
    """Forward process: z_t = sqrt(ab_t) z + sqrt(1 - ab_t) eps."""
    t = schedule.check_timestep(t)
    z = np.asarray(z)
    eps = np.asarray(eps)
    if z.shape != eps.shape:
        raise ShapeMismatch(f"latent {z.shape} vs noise {eps.shape}")
    ab = schedule.alpha_bar[t]
    out = np.sqrt(ab) * z.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)
    return out.astype(np.result_type(z, eps))


def cfg_combine(e_none, e_img, e_full, guidance):
    """Classifier-free guidance over the three conditioning levels.

    Computed in coefficient form (coefficients sum to 1), so degenerate
    weights collapse exactly: image=text=1 returns e_full bitwise.
    """
    e_none = np.asarray(e_none)
    e_img = np.asarray(e_img)
    e_full = np.asarray(e_full)
    if not (e_none.shape == e_img.shape == e_full.shape):
        raise ShapeMismatch(
            f"guidance inputs disagree: {e_none.shape} {e_img.shape} {e_full.shape}")
    c_none = 1.0 - guidance.image
    c_img = guidance.image - guidance.text
    c_full = guidance.text
    out = np.zeros(e_none.shape, dtype=np.float64)
    for c, e in ((c_none, e_none), (c_img, e_img), (c_full, e_full)):
        if c != 0.0:
            out += c * e.astype(np.float64)
    return out.astype(np.result_type(e_none, e_img, e_full))


def _ddim_move(z, eps_hat, t_from, t_to, schedule):
    """One deterministic DDIM transition in either time direction."""
    if t_from == t_to:
        return np.array(z, copy=True)
    ab_from = schedule.alpha_bar[t_from]
    ab_to = schedule.alpha_bar[t_to]
    z = np.asarray(z, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    z0 = (z - np.sqrt(1.0 - ab_from) * eps_hat) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * z0 + np.sqrt(1.0 - ab_to) * eps_hat


def ddim_step(z_t, eps_hat, t, t_prev, schedule):
    """Deterministic (eta=0) DDIM update from t down to t_prev."""
    t = schedule.check_timestep(t)
    t_prev = schedule.check_timestep(t_prev)
    if t_prev > t:
        raise TimestepOrder(f"t_prev {t_prev} > t {t}")
    z_t = np.asarray(z_t)
    eps_hat = np.asarray(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ShapeMismatch(f"latent {z_t.shape} vs noise {eps_hat.shape}")
    if t_prev == t:
        return np.array(z_t, copy=True)
    return _ddim_move(z_t, eps_hat, t, t_prev, schedule).astype(z_t.dtype)


def _substeps(t_hi, steps):
    """Uniformly spaced integer knots from t_hi down to 0, inclusive."""
    return np.unique(np.round(np.linspace(0, t_hi, steps + 1)).astype(int))[::-1]


def _guided_noise(z, t, denoiser, cond, guidance, schedule):
    """Client-side CFG: query only the conditioning levels with nonzero
    coefficients, reusing the unconditioned call when no image is attached."""
    c_none = 1.0 - guidance.image
    c_img = guidance.image - guidance.text
    c_full = guidance.text
    cache = {}

    def predict(variant, key):
        if key not in cache:
            cache[key] = np.asarray(denoiser.predict(z, t, variant))
        return cache[key]

    zeros = None
    e_none = e_img = e_full = None
    if c_none != 0.0:
        e_none = predict(UNCONDITIONED, "none")
    if c_img != 0.0:
        img_cond = cond.drop_text()
        key = "none" if img_cond.image is None else "img"
        e_img = predict(img_cond if key == "img" else UNCONDITIONED, key)
    if c_full != 0.0:
        e_full = predict(cond, "full")
    for e in (e_none, e_img, e_full):
        if e is not None:
            zeros = np.zeros_like(e)
            break
    if zeros is None:
        raise ValidationError("all guidance coefficients are zero")
    out = cfg_combine(e_none if e_none is not None else zeros,
                      e_img if e_img is not None else zeros,
                      e_full if e_full is not None else zeros, guidance)
    if not np.all(np.isfinite(out)):
        raise NaNDetected(f"denoiser output not finite at t={t}")
    return out


def sample(z_start, t_start, denoiser, steps, guidance, codec,
           cond=UNCONDITIONED, schedule=None):
    """Iterated guided DDIM from t_start down to 0.

    Returns (final latent, decoded image); both are plain detached arrays.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    schedule = schedule if schedule is not None else NoiseSchedule()
    t_start = schedule.check_timestep(t_start)
    z = np.array(z_start, copy=True)
    knots = _substeps(t_start, steps)
    for t, t_next in zip(knots[:-1], knots[1:]):
        eps = _guided_noise(z, int(t), denoiser, cond, guidance, schedule)
        z = ddim_step(z, eps.astype(z.dtype), int(t), int(t_next), schedule)
    return z, codec.decode(z)


def ddim_invert(z, t_target, denoiser, steps, codec=None, cond=UNCONDITIONED,
                schedule=None):
    """Run the DDIM recurrence upward from t=0 to t_target.

    The noise estimate for each move is evaluated at the lower endpoint with
    the full conditioning (no guidance mixing); pairing the inversion with
    `sample` at image=text=1 reproduces the same noise predictions.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    schedule = schedule if schedule is not None else NoiseSchedule()
    t_target = schedule.check_timestep(t_target)
    z = np.array(z, copy=True)
    knots = _substeps(t_target, steps)[::-1]
    for t, t_next in zip(knots[:-1], knots[1:]):
        eps = np.asarray(denoiser.predict(z, int(t), cond))
        if not np.all(np.isfinite(eps)):
            raise NaNDetected(f"denoiser output not finite at t={t}")
        z = _ddim_move(z, eps, int(t), int(t_next), schedule).astype(z.dtype)
    return z
