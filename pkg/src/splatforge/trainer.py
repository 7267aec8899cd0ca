"""Two-stage splat optimization driven by denoiser distillation.

The inpainting stage pulls renders toward samples from an image-conditioned
denoiser while anchoring already-observed pixels to the point-cloud render;
the refinement stage repeats the loop with a text-conditioned denoiser at low
noise, sharpened targets, and an opacity push toward fully opaque or empty
splats. Both stages share one iteration body: render a training view, carry
the latent to a sampled timestep (DDIM inversion by default), sample a clean
target, assemble gradients for every loss term, and take an adaptive step per
parameter group.
"""
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .diffusion import (Conditioning, GuidanceConfig, NoiseSchedule, add_noise,
                        ddim_invert, sample)
from .errors import (EmptyCloud, MalformedCheckpoint, NaNDetected,
                     RemoteFailure, ShapeMismatch, TrainingAborted,
                     ValidationError)
from .losses import (LossWeights, depth_pearson_loss, inpaint_loss,
                     opacity_loss, sharpen)
from .occlusion import render_inpaint_mask
from .render import RenderOutput, rasterize_points, render, render_gradients
from .scene import Camera, SplatCloud, quats_to_rotmats

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

# post-step parameter clamps; colors are physical, logits just stay in a
# range where sigmoid is numerically meaningful
COLOR_MIN, COLOR_MAX = 0.0, 1.0
LOGIT_CLAMP = 15.0

CHECKPOINT_VERSION = 1

_LOG = logging.getLogger(__name__)

_SCHEDULE = None


def _default_schedule():
    global _SCHEDULE
    if _SCHEDULE is None:
        _SCHEDULE = NoiseSchedule()
    return _SCHEDULE


# -- learning-rate schedules --------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    """Constant rate, or warmup hold followed by log-linear decay.

    final=None means constant. Otherwise the rate holds `initial` for
    warmup_steps, then decays so that log(rate) moves linearly from
    log(initial) to log(final) over decay_steps, staying at `final` after.
    """

    initial: float
    final: Optional[float] = None
    decay_steps: int = 0
    warmup_steps: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.initial) and self.initial > 0):
            raise ValidationError(f"initial rate must be > 0, got {self.initial}")
        if self.final is not None:
            if not (np.isfinite(self.final) and self.final > 0):
                raise ValidationError(f"final rate must be > 0, got {self.final}")
            if self.decay_steps <= 0:
                raise ValidationError("decaying schedule needs decay_steps > 0")
        if self.warmup_steps < 0 or self.decay_steps < 0:
            raise ValidationError("warmup_steps and decay_steps must be >= 0")

    @property
    def kind(self):
        return "constant" if self.final is None else "log-linear"

    @staticmethod
    def constant(rate):
        return LrSchedule(initial=rate)


def lr_at(schedule: LrSchedule, step):
    """Rate for an optimizer step index (0-based)."""
    if step < 0:
        raise ValidationError(f"step must be >= 0, got {step}")
    if schedule.final is None:
        return schedule.initial
    frac = (step - schedule.warmup_steps) / schedule.decay_steps
    frac = min(max(frac, 0.0), 1.0)
    return schedule.initial * (schedule.final / schedule.initial) ** frac


# -- plans --------------------------------------------------------------------

def _check_t_range(t_range):
    lo, hi = t_range
    if not (0.0 < lo <= hi < 1.0):
        raise ValidationError(
            f"timestep range must satisfy 0 < lo <= hi < 1, got {t_range}")
    return float(lo), float(hi)


@dataclass(frozen=True)
class DensifyConfig:
    """Thresholds for adaptive splat control; defaults change nothing."""

    grad_threshold: float = np.inf   # split splats whose mean positional
                                     # gradient magnitude exceeds this
    prune_opacity: float = 0.005     # drop splats below this opacity
    max_splats: Optional[int] = None
    split_factor: float = 1.6        # children shrink by this scale factor

    def __post_init__(self):
        if self.grad_threshold <= 0:
            raise ValidationError("grad_threshold must be > 0")
        if not (0.0 <= self.prune_opacity < 1.0):
            raise ValidationError("prune_opacity must be in [0, 1)")
        if self.max_splats is not None and self.max_splats < 1:
            raise ValidationError("max_splats must be >= 1")
        if self.split_factor <= 1.0:
            raise ValidationError("split_factor must be > 1")


@dataclass(frozen=True)
class StagePlan:
    """Everything one optimization stage needs besides the scene itself."""

    iterations: int
    model: str                        # denoiser the stage drives
    t_range: Tuple[float, float]      # timestep interval as schedule fractions
    guidance: GuidanceConfig
    weights: LossWeights
    lr: Mapping[str, LrSchedule]      # one schedule per parameter group
    sample_steps: int = 25
    use_inversion: bool = True
    sharpen: bool = False
    depth_every: int = 1              # evaluate the depth term every n steps
    densify: Optional[DensifyConfig] = None
    densify_every: int = 0            # 0 disables adaptive splat control

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError(f"iterations must be >= 0, got {self.iterations}")
        if not self.model:
            raise ValidationError("plan needs a denoiser model id")
        object.__setattr__(self, "t_range", _check_t_range(self.t_range))
        object.__setattr__(self, "lr", dict(self.lr))
        if set(self.lr) != set(SplatCloud.PARAM_NAMES):
            raise ValidationError(
                f"lr must cover exactly {sorted(SplatCloud.PARAM_NAMES)}, "
                f"got {sorted(self.lr)}")
        if self.sample_steps < 1:
            raise ValidationError("sample_steps must be >= 1")
        if self.depth_every < 1:
            raise ValidationError("depth_every must be >= 1")
        if self.densify_every < 0:
            raise ValidationError("densify_every must be >= 0")


def inpaint_plan(iterations=15000):
    """Stage defaults for image-conditioned inpainting distillation."""
    return StagePlan(
        iterations=iterations,
        model="inpaint",
        t_range=(0.1, 0.95),
        guidance=GuidanceConfig(image=1.8, text=7.5),
        weights=LossWeights(lambda_latent=0.1, lambda_image=0.01,
                            lambda_lpips=100.0, lambda_anchor=10000.0,
                            lambda_depth=1000.0),
        lr={
            "mu": LrSchedule(0.01, 0.00005, decay_steps=100000,
                             warmup_steps=5000),
            "log_scale": LrSchedule(0.005, 0.0001, decay_steps=10000,
                                    warmup_steps=7000),
            "quat": LrSchedule.constant(0.01),
            "opacity_logit": LrSchedule.constant(0.01),
            "color": LrSchedule.constant(0.001),
        },
        sample_steps=25,
        use_inversion=True,
        sharpen=False,
    )


def refine_plan(iterations=3000):
    """Stage defaults for text-conditioned low-noise refinement.

    guidance image=1.0 makes the combination collapse to plain text
    classifier-free guidance: uncond + 7.5 * (full - uncond).
    """
    return StagePlan(
        iterations=iterations,
        model="text",
        t_range=(0.1, 0.3),
        guidance=GuidanceConfig(image=1.0, text=7.5),
        weights=LossWeights(lambda_latent=0.01, lambda_image=0.01,
                            lambda_lpips=100.0, lambda_anchor=0.0,
                            lambda_depth=1000.0, lambda_opacity=10.0),
        lr={
            "mu": LrSchedule(0.0001, 0.0000005, decay_steps=3000,
                             warmup_steps=750),
            "log_scale": LrSchedule.constant(0.0001),
            "quat": LrSchedule.constant(0.01),
            "opacity_logit": LrSchedule.constant(0.01),
            "color": LrSchedule.constant(0.001),
        },
        sample_steps=100,
        use_inversion=True,
        sharpen=True,
    )


def sample_timestep(t_range, rng, schedule=None):
    """Draw a uniform fraction from t_range and map it to an integer step."""
    lo, hi = _check_t_range(t_range)
    schedule = schedule if schedule is not None else _default_schedule()
    return schedule.t_from_fraction(float(rng.uniform(lo, hi)))


# -- training views -----------------------------------------------------------

@dataclass(eq=False)
class TrainView:
    """One training pose with its cached point render and coverage mask."""

    camera: Camera
    i_pc: np.ndarray    # (H,W,3) point-cloud render, the anchor image
    m_occl: np.ndarray  # (H,W) 1 where the scene already explains the pixel
    prompt: str = ""

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        self.i_pc = np.asarray(self.i_pc, dtype=np.float64)
        self.m_occl = np.asarray(self.m_occl, dtype=np.float64)
        if self.i_pc.shape != (h, w, 3):
            raise ShapeMismatch(f"i_pc must be {(h, w, 3)}, got {self.i_pc.shape}")
        if self.m_occl.shape != (h, w):
            raise ShapeMismatch(f"m_occl must be {(h, w)}, got {self.m_occl.shape}")


def prepare_views(points, occl, cameras, prompts=None, dilation_px=None):
    """Cache the per-pose anchor render and coverage mask.

    Both are fixed for the whole optimization, so they are rasterized once:
    i_pc from the scene points alone, m_occl from the z-buffered union of
    scene and occlusion-volume points.
    """
    if not cameras:
        raise ValidationError("at least one training camera is required")
    if prompts is None:
        prompts = [""] * len(cameras)
    if len(prompts) != len(cameras):
        raise ValidationError(
            f"{len(prompts)} prompts for {len(cameras)} cameras")
    views = []
    for camera, prompt in zip(cameras, prompts):
        buf, _, _, _ = rasterize_points(points.positions, points.colors, camera)
        mask = render_inpaint_mask(points, occl, camera, dilation_px)
        views.append(TrainView(camera=camera, i_pc=buf, m_occl=mask,
                               prompt=prompt))
    return views


# -- optimizer ----------------------------------------------------------------

@dataclass
class TrainState:
    """Adaptive-moment buffers plus the global step counter."""

    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @staticmethod
    def fresh(cloud: SplatCloud):
        zeros = {name: np.zeros(getattr(cloud, name).shape, dtype=np.float64)
                 for name in SplatCloud.PARAM_NAMES}
        return TrainState(step=0,
                          m={k: z.copy() for k, z in zeros.items()},
                          v=zeros)

    def check(self, cloud: SplatCloud):
        if self.step < 0:
            raise ValidationError(f"step must be >= 0, got {self.step}")
        for name in SplatCloud.PARAM_NAMES:
            want = getattr(cloud, name).shape
            for label, table in (("m", self.m), ("v", self.v)):
                if name not in table:
                    raise ValidationError(f"optimizer state missing {label}[{name}]")
                if table[name].shape != want:
                    raise ShapeMismatch(
                        f"optimizer {label}[{name}] is {table[name].shape}, "
                        f"cloud needs {want}")


def adam_step(cloud: SplatCloud, grads, state: TrainState, lr_schedules):
    """One adaptive update per parameter group, in place on the cloud.

    Moments are kept in float64; the parameters themselves stay float32.
    """
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name in SplatCloud.PARAM_NAMES:
        g = np.asarray(getattr(grads, name), dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        rate = lr_at(lr_schedules[name], state.step)
        update = rate * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        param = getattr(cloud, name)
        param[...] = (param.astype(np.float64) - update).astype(np.float32)
    state.step += 1


# -- one distillation iteration ----------------------------------------------

@contextmanager
def _phase(name):
    try:
        yield
    except RemoteFailure as exc:
        raise TrainingAborted(
            f"persistent remote failure during {name}: {exc}") from exc


@dataclass
class StepOutcome:
    loss: float
    terms: Dict[str, float]   # inpaint / depth / opacity contributions
    grads: object             # RenderGrads, opacity term folded in
    render: RenderOutput
    aux: Dict[str, object]    # t, z, z_hat, x_hat, x_target, d_hat


def _isolated_weights(**kwargs):
    return LossWeights(**kwargs)


def _blame(cloud, view, x, d, z, z_hat, x_target, d_hat, weights, perceptual):
    """Name every loss term that evaluates non-finite, for abort messages."""
    h, w = x.shape[:2]
    dummy = np.zeros((h, w, 3))
    probes = []
    if weights.lambda_latent != 0.0 and z is not None:
        probes.append(("latent", lambda: inpaint_loss(
            z, z_hat, x, x, view.i_pc, view.m_occl,
            _isolated_weights(lambda_latent=weights.lambda_latent))[0]))
    if x_target is not None:
        if weights.lambda_image != 0.0:
            probes.append(("image", lambda: inpaint_loss(
                dummy, dummy, x, x_target, view.i_pc, view.m_occl,
                _isolated_weights(lambda_image=weights.lambda_image))[0]))
        if weights.lambda_lpips != 0.0:
            probes.append(("lpips", lambda: inpaint_loss(
                dummy, dummy, x, x_target, view.i_pc, view.m_occl,
                _isolated_weights(lambda_lpips=weights.lambda_lpips),
                perceptual)[0]))
    if weights.lambda_anchor != 0.0:
        probes.append(("anchor", lambda: inpaint_loss(
            dummy, dummy, x, x, view.i_pc, view.m_occl,
            _isolated_weights(lambda_anchor=weights.lambda_anchor))[0]))
    if weights.lambda_depth != 0.0 and d_hat is not None:
        probes.append(("depth", lambda: depth_pearson_loss(d, d_hat)[0]))
    if weights.lambda_opacity != 0.0:
        probes.append(("opacity", lambda: opacity_loss(cloud)[0]))
    bad = []
    for name, probe in probes:
        try:
            value = probe()
        except Exception:
            bad.append(name)
            continue
        if not np.isfinite(value):
            bad.append(name)
    return bad or ["unknown"]


def assemble_gradients(cloud, view, out, z, z_hat, x_target, d_hat, weights,
                       perceptual=None, codec=None, warn=None):
    """Evaluate every enabled loss term and push gradients onto the splats.

    z/z_hat or x_target may be None to skip the latent or image-space terms
    regardless of their weights. Latent gradients reach the splats through
    the codec's encode_vjp; codecs that cannot differentiate make the term
    optimize nothing, which is reported through `warn` and otherwise dropped.
    Raises TrainingAborted naming the offending term(s) on a non-finite loss.
    """
    x = np.asarray(out.color, dtype=np.float64)
    d = np.asarray(out.depth, dtype=np.float64)

    w_eff = weights
    z_arg, z_hat_arg = z, z_hat
    if z is None:
        w_eff = replace(w_eff, lambda_latent=0.0)
        z_arg = z_hat_arg = x
    x_arg = x_target
    if x_target is None:
        w_eff = replace(w_eff, lambda_image=0.0, lambda_lpips=0.0)
        x_arg = x

    loss, g_z, g_x = inpaint_loss(z_arg, z_hat_arg, x, x_arg, view.i_pc,
                                  view.m_occl, w_eff, perceptual)
    terms = {"inpaint": loss}

    g_x_total = g_x
    if w_eff.lambda_latent != 0.0 and np.any(g_z):
        pulled = codec.encode_vjp(x, g_z) if codec is not None else None
        if pulled is None:
            if warn is not None:
                warn("codec cannot backpropagate encode; "
                     "latent-term gradients are dropped")
        else:
            g_x_total = g_x + np.asarray(pulled, dtype=np.float64)

    upstream_depth = None
    depth_term = 0.0
    if weights.lambda_depth != 0.0 and d_hat is not None:
        d_hat = np.asarray(d_hat, dtype=np.float64)
        # constant maps carry no correlation signal; skip rather than abort
        if d.size >= 2 and np.ptp(d) != 0.0 and np.ptp(d_hat) != 0.0:
            dl, g_d = depth_pearson_loss(d, d_hat)
            depth_term = weights.lambda_depth * dl
            upstream_depth = weights.lambda_depth * g_d
    terms["depth"] = depth_term
    loss += depth_term

    grads = render_gradients(cloud, view.camera, g_x_total, upstream_depth)

    opacity_term = 0.0
    if weights.lambda_opacity != 0.0:
        ol, g_o = opacity_loss(cloud)
        opacity_term = weights.lambda_opacity * ol
        grads.opacity_logit = grads.opacity_logit + weights.lambda_opacity * g_o
    terms["opacity"] = opacity_term
    loss += opacity_term

    if not np.isfinite(loss):
        bad = _blame(cloud, view, x, d, z, z_hat, x_target, d_hat, weights,
                     perceptual)
        raise TrainingAborted(
            f"non-finite loss in term(s): {', '.join(bad)}")
    return loss, terms, grads


def distill_step(cloud, view, plan, denoiser, depth, codec, rng, *,
                 image_conditioned=True, include_depth=True, schedule=None,
                 perceptual=None, warn=None):
    """Evaluate one distillation iteration; no parameters are touched.

    Renders the view, carries the encoded render to a sampled timestep
    (DDIM inversion or forward noising per plan), samples the clean target,
    optionally predicts depth from it, and assembles all gradients. The
    expensive sampling is skipped entirely when no enabled term consumes it.
    """
    schedule = schedule if schedule is not None else _default_schedule()
    for helper in (denoiser, depth):
        hook = getattr(helper, "set_view", None)
        if hook is not None:
            hook(view.camera)

    out = render(cloud, view.camera)
    x = out.color
    w = plan.weights
    want_depth = include_depth and w.lambda_depth != 0.0 and depth is not None
    needs_sample = (want_depth or w.lambda_latent != 0.0
                    or w.lambda_image != 0.0 or w.lambda_lpips != 0.0)

    t = z = z_hat = x_hat = x_target = d_hat = None
    if needs_sample:
        with _phase("latent encode"):
            z = np.asarray(codec.encode(x))
        t = sample_timestep(plan.t_range, rng, schedule)
        cond = (Conditioning(view.prompt, image=view.i_pc, mask=view.m_occl)
                if image_conditioned else Conditioning(view.prompt))
        if plan.use_inversion:
            with _phase("ddim inversion"):
                z_t = ddim_invert(z, t, denoiser, plan.sample_steps,
                                  cond=cond, schedule=schedule)
        else:
            eps = rng.standard_normal(z.shape)
            z_t = add_noise(z, t, eps, schedule)
        with _phase("ddim sampling"):
            z_hat, x_hat = sample(z_t, t, denoiser, plan.sample_steps,
                                  plan.guidance, codec, cond, schedule)
        # sharpening replaces only the image-space target; the depth model
        # still sees the raw sample
        x_target = sharpen(x_hat) if plan.sharpen else x_hat
        if want_depth:
            with _phase("depth prediction"):
                d_hat = depth.request(x_hat)

    loss, terms, grads = assemble_gradients(
        cloud, view, out, z, z_hat, x_target, d_hat, w,
        perceptual=perceptual, codec=codec, warn=warn)
    aux = {"t": t, "z": z, "z_hat": z_hat, "x_hat": x_hat,
           "x_target": x_target, "d_hat": d_hat}
    return StepOutcome(loss=loss, terms=terms, grads=grads, render=out,
                       aux=aux)


# -- stage loops --------------------------------------------------------------

def _run_stage(cloud, views, plan, denoiser, depth, codec, rng, state, hooks,
               schedule, perceptual, image_conditioned):
    if not views:
        raise ValidationError("at least one training view is required")
    if len(cloud) == 0:
        raise EmptyCloud("cannot train an empty cloud")
    if plan.weights.lambda_depth != 0.0 and depth is None:
        raise ValidationError(
            "plan has lambda_depth != 0 but no depth provider was given")

    cloud = cloud.copy()
    if state is None:
        state = TrainState.fresh(cloud)
    else:
        state.check(cloud)
    schedule = schedule if schedule is not None else _default_schedule()

    seen_warnings = set()

    def warn(message):
        if message not in seen_warnings:
            seen_warnings.add(message)
            _LOG.warning(message)

    grad_accum = np.zeros(len(cloud))
    grad_count = 0
    for it in range(plan.iterations):
        view_ix = int(rng.integers(len(views)))
        include_depth = it % plan.depth_every == 0
        try:
            outcome = distill_step(
                cloud, views[view_ix], plan, denoiser, depth, codec, rng,
                image_conditioned=image_conditioned,
                include_depth=include_depth, schedule=schedule,
                perceptual=perceptual, warn=warn)
        except (TrainingAborted, NaNDetected, RemoteFailure) as exc:
            raise TrainingAborted(f"iteration {it}: {exc}") from exc

        adam_step(cloud, outcome.grads, state, plan.lr)
        np.clip(cloud.color, COLOR_MIN, COLOR_MAX, out=cloud.color)
        np.clip(cloud.opacity_logit, -LOGIT_CLAMP, LOGIT_CLAMP,
                out=cloud.opacity_logit)

        if plan.densify is not None and plan.densify_every:
            grad_accum += np.linalg.norm(outcome.grads.mu, axis=1)
            grad_count += 1
            if (it + 1) % plan.densify_every == 0:
                new_cloud = densify_and_prune(cloud, grad_accum / grad_count,
                                              plan.densify)
                if len(new_cloud) == 0:
                    raise TrainingAborted(f"iteration {it}: every splat was pruned")
                if new_cloud is not cloud:
                    cloud = new_cloud
                    # moments are row-aligned with the old cloud; restart
                    # them but keep the step count so schedules continue
                    kept_step = state.step
                    state = TrainState.fresh(cloud)
                    state.step = kept_step
                grad_accum = np.zeros(len(cloud))
                grad_count = 0

        if hooks is not None:
            hooks({"iteration": it, "view": view_ix, "t": outcome.aux["t"],
                   "loss": outcome.loss, "terms": outcome.terms,
                   "cloud": cloud, "state": state})
    return cloud


def run_inpaint_stage(cloud, views, plan, denoiser, depth, codec, rng,
                      state=None, hooks=None, schedule=None, perceptual=None):
    """Image-conditioned distillation over the cached training views.

    Each iteration picks a view uniformly, conditions the denoiser on that
    view's point render and coverage mask, and distills the sampled target
    into the splats. Returns the trained cloud; the input is not modified.
    """
    return _run_stage(cloud, views, plan, denoiser, depth, codec, rng, state,
                      hooks, schedule, perceptual, image_conditioned=True)


def run_refine_stage(cloud, views, plan, denoiser, codec, rng, depth=None,
                     state=None, hooks=None, schedule=None, perceptual=None):
    """Text-conditioned low-noise refinement over the same views.

    Identical loop to the inpainting stage except the denoiser sees only the
    prompt, targets default to sharpened samples, and the opacity term in
    the plan weights pushes splats toward fully opaque or empty.
    """
    return _run_stage(cloud, views, plan, denoiser, depth, codec, rng, state,
                      hooks, schedule, perceptual, image_conditioned=False)


# -- adaptive splat control ----------------------------------------------------

def _split_splats(parents: SplatCloud, factor):
    """Two shrunken children per parent, offset along the major axis."""
    scales = np.exp(parents.log_scale.astype(np.float64))
    axis_ix = np.argmax(scales, axis=1)
    rows = np.arange(len(parents))
    rot = quats_to_rotmats(parents.quat)
    axes = rot[rows, :, axis_ix]                   # world-space major axis
    offset = 0.5 * scales[rows, axis_ix][:, None] * axes
    log_shrunk = parents.log_scale.astype(np.float64) - math.log(factor)
    children = []
    for sign in (1.0, -1.0):
        children.append(SplatCloud(
            mu=parents.mu.astype(np.float64) + sign * offset,
            log_scale=log_shrunk,
            quat=parents.quat,
            opacity_logit=parents.opacity_logit,
            color=parents.color,
        ))
    return children


def densify_and_prune(cloud: SplatCloud, mean_grads, config: DensifyConfig):
    """Split high-gradient splats, prune near-transparent ones, cap the count.

    mean_grads is the running mean positional-gradient magnitude per splat,
    accumulated by the caller. Returns the input object unchanged when no
    threshold fires.
    """
    mean_grads = np.asarray(mean_grads, dtype=np.float64)
    if mean_grads.shape != (len(cloud),):
        raise ShapeMismatch(
            f"mean_grads must be ({len(cloud)},), got {mean_grads.shape}")
    opacity = cloud.opacities()
    keep = opacity >= config.prune_opacity
    split = keep & (mean_grads > config.grad_threshold)
    over_cap = (config.max_splats is not None
                and len(cloud) > config.max_splats)
    if not split.any() and keep.all() and not over_cap:
        return cloud

    merged = cloud.select(keep & ~split)
    if split.any():
        for child in _split_splats(cloud.select(split), config.split_factor):
            merged = SplatCloud.concatenate(merged, child)
    if config.max_splats is not None and len(merged) > config.max_splats:
        order = np.argsort(-merged.opacities(), kind="stable")[:config.max_splats]
        order.sort()   # retain original relative ordering
        merged = merged.select(order)
    return merged


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, cloud: SplatCloud, state: TrainState):
    """Write cloud, optimizer moments, and step counter to one .npz file."""
    state.check(cloud)
    arrays = {"version": np.int64(CHECKPOINT_VERSION),
              "step": np.int64(state.step)}
    for name in SplatCloud.PARAM_NAMES:
        arrays[f"cloud_{name}"] = getattr(cloud, name)
        arrays[f"m_{name}"] = state.m[name]
        arrays[f"v_{name}"] = state.v[name]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Read a checkpoint back; returns (cloud, state)."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise MalformedCheckpoint(f"unreadable checkpoint: {exc}") from exc
    with data:
        needed = ["version", "step"]
        for name in SplatCloud.PARAM_NAMES:
            needed += [f"cloud_{name}", f"m_{name}", f"v_{name}"]
        for key in needed:
            if key not in data:
                raise MalformedCheckpoint(f"checkpoint missing '{key}'")
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise MalformedCheckpoint(
                f"unsupported checkpoint version {version}")
        step = int(data["step"])
        if step < 0:
            raise MalformedCheckpoint(f"negative step counter {step}")
        try:
            cloud = SplatCloud(*(data[f"cloud_{name}"]
                                 for name in SplatCloud.PARAM_NAMES))
        except ValidationError as exc:
            raise MalformedCheckpoint(f"bad cloud arrays: {exc}") from exc
        state = TrainState(
            step=step,
            m={name: data[f"m_{name}"].astype(np.float64)
               for name in SplatCloud.PARAM_NAMES},
            v={name: data[f"v_{name}"].astype(np.float64)
               for name in SplatCloud.PARAM_NAMES},
        )
        try:
            state.check(cloud)
        except ValidationError as exc:
            raise MalformedCheckpoint(str(exc)) from exc
    return cloud, state
