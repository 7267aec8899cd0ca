"""Deterministic in-process denoisers and codecs for tests and offline runs.

None of these approximate a real generative model. They exist so the full
pipeline can run reproducibly without network weights: the oracle variants
pull every sample toward a known target, the zero/nonlinear variants have
closed forms or controlled drift for checking the samplers themselves.
"""
import numpy as np

from .depth_init import DepthProvider
from .diffusion import Denoiser, LatentCodec, NoiseSchedule
from .errors import ValidationError


class IdentityCodec(LatentCodec):
    """Latent space is the image itself; round trips are bitwise exact."""

    def encode(self, image):
        return np.array(image, copy=True)

    def decode(self, latent):
        return np.array(latent, copy=True)

    def encode_vjp(self, image, grad_latent):
        grad_latent = np.asarray(grad_latent, dtype=np.float64)
        if grad_latent.shape != np.asarray(image).shape:
            raise ValidationError(
                f"latent gradient {grad_latent.shape} does not match image "
                f"{np.asarray(image).shape}")
        return grad_latent.copy()


class OracleDenoiser(Denoiser):
    """Predicts exactly the noise separating z_t from a fixed clean target.

    eps_hat = (z_t - sqrt(ab_t) z*) / sqrt(1 - ab_t), so any DDIM step toward
    0 lands on encode(target). At t=0 the separation is zero by definition.
    """

    def __init__(self, target_image, codec=None, schedule=None):
        codec = codec if codec is not None else IdentityCodec()
        self.schedule = schedule if schedule is not None else NoiseSchedule()
        self.z_target = np.asarray(codec.encode(target_image), dtype=np.float64)

    def predict(self, z_t, t, cond):
        t = self.schedule.check_timestep(t)
        z_t = np.asarray(z_t)
        ab = self.schedule.alpha_bar[t]
        if t == 0:
            return np.zeros(z_t.shape, dtype=z_t.dtype)
        out = (z_t.astype(np.float64) - np.sqrt(ab) * self.z_target) / np.sqrt(1.0 - ab)
        return out.astype(z_t.dtype)


class SceneOracle(Denoiser):
    """View-aware oracle: the target tracks the camera announced by set_view.

    Lets multi-view optimization distill against per-pose ground truth; each
    view change rebuilds the fixed-target oracle for that pose's render.
    """

    def __init__(self, scene_, codec=None, schedule=None):
        self.scene = scene_
        self.codec = codec if codec is not None else IdentityCodec()
        self.schedule = schedule if schedule is not None else NoiseSchedule()
        self._oracle = None

    def set_view(self, camera):
        color, _, _ = self.scene.raycast(camera)
        self._oracle = OracleDenoiser(color, codec=self.codec,
                                      schedule=self.schedule)

    def predict(self, z_t, t, cond):
        if self._oracle is None:
            raise ValidationError("set_view must be called before predict")
        return self._oracle.predict(z_t, t, cond)


class ZeroDenoiser(Denoiser):
    """Always predicts zero noise; DDIM trajectories have closed forms."""

    def predict(self, z_t, t, cond):
        return np.zeros(np.asarray(z_t).shape, dtype=np.asarray(z_t).dtype)


class NonlinearDenoiser(Denoiser):
    """Small bounded drift that is genuinely nonlinear in the latent.

    Inversion followed by sampling is only exact for affine predictors, so
    round-trip discretization error needs this mock to be visible at all.
    """

    def __init__(self, gain=0.05):
        self.gain = float(gain)

    def predict(self, z_t, t, cond):
        z_t = np.asarray(z_t)
        return (self.gain * np.tanh(z_t.astype(np.float64))).astype(z_t.dtype)


class GroundTruthDepth(DepthProvider):
    """Depth provider backed by a synthetic scene; exact up to raycasting.

    Returns the true camera-space depth for the view set by set_view,
    ignoring the image argument. Miss pixels come back as 0 and should be
    excluded from alignment by the caller's validity mask.
    """

    def __init__(self, scene_):
        self.scene = scene_
        self.camera = None

    def set_view(self, camera):
        self.camera = camera

    def request(self, image):
        if self.camera is None:
            raise ValidationError("set_view must be called before request")
        _, depth, _ = self.scene.raycast(self.camera)
        return np.asarray(depth, dtype=np.float64)


class AffineDepth(GroundTruthDepth):
    """Ground-truth depth remapped by a fixed scale and shift.

    Exercises alignment: a correct aligner recovers the inverse map, so
    downstream geometry should match the unmapped provider exactly.
    """

    def __init__(self, scene_, a=2.0, b=-0.5):
        super().__init__(scene_)
        self.a = float(a)
        self.b = float(b)

    def request(self, image):
        return self.a * super().request(image) + self.b
