"""Stage drivers: init, train, render. Each writes inspectable artifacts.

Layout under the configured output directory:

    init/reference.png         reference view
    init/reference_depth.npy   depth used for lifting
    init/pointcloud.ply        lifted + outpainted points
    init/occlusion.ply         occlusion-volume centers
    init/grid.bin              carved occupancy grid
    init/views/<id>.png        per-pose point renders (the anchor images)
    init/masks/<id>.png        per-pose inpaint masks
    init/initial.ply           splats initialized from the points
    poses.json                 editable trajectory (ref + aux at first)
    <stage>/checkpoint.npz     resumable optimizer snapshot
    <stage>/scene.ply          stage output cloud
    render/<id>.png|_depth.npy rendered trajectory
"""
import dataclasses
import logging
from pathlib import Path

import numpy as np

from .config import PipelineConfig, build_backends
from .depth_init import init_splats_from_points, lift_depth, make_aux_poses, \
    grow_pointcloud
from .diffusion import Conditioning, NoiseSchedule, add_noise, sample
from .errors import ConfigError, StageOrderError
from .formats import (Pose, read_ply, read_png, read_point_ply, read_poses,
                      write_depth, write_ply, write_png, write_point_ply,
                      write_poses)
from .occlusion import (build_grid, carve_visibility, occlusion_volume,
                        render_inpaint_mask, save_grid)
from .render import rasterize_points, render
from .scene import TAG_REF
from .trainer import (load_checkpoint, prepare_views, run_inpaint_stage,
                      run_refine_stage, save_checkpoint)

_LOG = logging.getLogger(__name__)

STAGE_SEEDS = {"init": 0, "inpaint": 1, "refine": 2}
LOG_EVERY = 50


class Artifacts:
    """Path bookkeeping for one output directory."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def init_dir(self):
        return self.root / "init"

    @property
    def reference_png(self):
        return self.init_dir / "reference.png"

    @property
    def reference_depth(self):
        return self.init_dir / "reference_depth.npy"

    @property
    def pointcloud(self):
        return self.init_dir / "pointcloud.ply"

    @property
    def occlusion(self):
        return self.init_dir / "occlusion.ply"

    @property
    def grid(self):
        return self.init_dir / "grid.bin"

    @property
    def initial(self):
        return self.init_dir / "initial.ply"

    @property
    def poses(self):
        return self.root / "poses.json"

    def mask_png(self, pose_id):
        return self.init_dir / "masks" / f"{pose_id}.png"

    def view_png(self, pose_id):
        return self.init_dir / "views" / f"{pose_id}.png"

    def checkpoint(self, stage):
        return self.root / stage / "checkpoint.npz"

    def scene_ply(self, stage):
        return self.root / stage / "scene.ply"

    def render_dir(self):
        return self.root / "render"

    def latest_scene(self):
        """Most advanced trained cloud, or None before training."""
        for stage in ("refine", "inpaint"):
            if self.scene_ply(stage).is_file():
                return self.scene_ply(stage), stage
        if self.initial.is_file():
            return self.initial, "init"
        return None, None

    def require_init(self):
        if not (self.pointcloud.is_file() and self.grid.is_file()
                and self.initial.is_file()):
            raise StageOrderError(
                f"init artifacts missing under {self.init_dir}; run init "
                f"first")


def reference_view(config: PipelineConfig, backends):
    """Reference image and lift depth from the configured scene source."""
    scene, camera = config.scene_and_camera()
    if scene is not None:
        image, _, _ = scene.raycast(camera)
    else:
        image = read_png(config.reference_image)
        if image.ndim != 3 or image.shape[:2] != (camera.height,
                                                  camera.width):
            raise ConfigError(
                f"reference image is {image.shape}, camera expects "
                f"{(camera.height, camera.width, 3)}")
    hook = getattr(backends.depth, "set_view", None)
    if hook is not None:
        hook(camera)
    depth = np.asarray(backends.depth.request(image), dtype=np.float64)
    return camera, np.asarray(image, dtype=np.float64), depth


def cmd_init(config: PipelineConfig):
    """Lift the reference view, outpaint aux views, carve occlusion.

    Returns the Artifacts handle. Deterministic: rerunning with the same
    config reproduces every file byte for byte.
    """
    paths = Artifacts(config.output_dir)
    scene, _ = config.scene_and_camera()
    backends = build_backends(config, scene=scene)
    rng = np.random.default_rng([config.seed, STAGE_SEEDS["init"]])
    schedule = NoiseSchedule()

    camera, image, depth = reference_view(config, backends)
    valid = depth > 0.0
    points = lift_depth(camera, image, depth, valid, tag=TAG_REF)
    _LOG.info("lifted %d reference points", len(points))

    aux_cams = make_aux_poses(camera, config.aux_offsets)
    aux_images = []
    for ix, (aux_cam, prompt) in enumerate(zip(aux_cams, config.aux_prompts)):
        image_aux = _outpaint_view(points, aux_cam, prompt, backends, rng,
                                   config.stages["inpaint"], schedule)
        aux_images.append(image_aux)
        points = grow_pointcloud(points, aux_cam, image_aux, backends.depth,
                                 tag=ix + 1)
        _LOG.info("grew cloud to %d points at aux offset %g", len(points),
                  config.aux_offsets[ix])

    grid = build_grid(points, resolution=config.grid_resolution)
    carve_visibility(grid, camera.position)
    occl = occlusion_volume(grid)
    splats = init_splats_from_points(points)

    paths.init_dir.mkdir(parents=True, exist_ok=True)
    (paths.init_dir / "masks").mkdir(exist_ok=True)
    (paths.init_dir / "views").mkdir(exist_ok=True)
    write_png(paths.reference_png, image)
    write_depth(paths.reference_depth, depth)
    write_point_ply(points, paths.pointcloud)
    write_point_ply(occl, paths.occlusion)
    save_grid(paths.grid, grid)
    write_ply(splats, paths.initial)
    # render inspection views from the cloud as later stages will read it,
    # so the view PNGs match the training anchors byte for byte
    points = read_point_ply(paths.pointcloud)
    occl = read_point_ply(paths.occlusion)

    poses = [Pose(id="ref", role="ref", camera=camera)]
    poses += [Pose(id=f"aux{i}", role="aux", camera=cam)
              for i, cam in enumerate(aux_cams)]
    write_poses(poses, paths.poses)
    for pose in poses:
        buf, _, _, _ = rasterize_points(points.positions, points.colors,
                                        pose.camera)
        mask = render_inpaint_mask(points, occl, pose.camera,
                                   config.dilation_px)
        write_png(paths.view_png(pose.id), buf)
        write_png(paths.mask_png(pose.id), mask)
    _LOG.info("init artifacts written to %s", paths.init_dir)
    return paths


def _outpaint_view(points, camera, prompt, backends, rng, plan, schedule):
    """Fill the uncovered pixels of a slid view with a full sample."""
    buf, _, hit, _ = rasterize_points(points.positions, points.colors, camera)
    holes = ~hit
    if not holes.any():
        return np.asarray(buf, dtype=np.float64)
    for model in (backends.inpaint, backends.depth):
        hook = getattr(model, "set_view", None)
        if hook is not None:
            hook(camera)
    cond = Conditioning(prompt, image=np.asarray(buf, dtype=np.float64),
                        mask=holes.astype(np.float64))
    z0 = np.asarray(backends.codec.encode(buf), dtype=np.float64)
    eps = rng.standard_normal(z0.shape)
    t_top = schedule.T
    z_t = add_noise(z0, t_top, eps, schedule)
    _, decoded = sample(z_t, t_top, backends.inpaint, plan.sample_steps,
                        plan.guidance, backends.codec, cond=cond,
                        schedule=schedule)
    return np.asarray(decoded, dtype=np.float64)


def _stage_prompts(config: PipelineConfig, poses):
    """Per-view prompt: aux poses keep their own, everything else the main."""
    prompts = []
    aux_ix = 0
    for pose in poses:
        if pose.role == "aux" and aux_ix < len(config.aux_prompts):
            prompts.append(config.aux_prompts[aux_ix])
            aux_ix += 1
        else:
            prompts.append(config.prompt)
    return prompts


def cmd_train(config: PipelineConfig, stage):
    """Run one optimization stage, resuming its checkpoint if present."""
    if stage not in ("inpaint", "refine"):
        raise ConfigError(f"unknown stage {stage!r}; choose inpaint or refine")
    paths = Artifacts(config.output_dir)
    paths.require_init()
    if stage == "refine" and not paths.scene_ply("inpaint").is_file():
        raise StageOrderError("refine requires the inpaint stage output; "
                              "run train --stage inpaint first")

    scene, _ = config.scene_and_camera()
    backends = build_backends(config, scene=scene)
    points = read_point_ply(paths.pointcloud)
    occl = read_point_ply(paths.occlusion)
    poses = read_poses(paths.poses)
    train_poses = [p for p in poses if p.role != "eval"]
    cameras = [p.camera for p in train_poses]
    prompts = _stage_prompts(config, train_poses)
    views = prepare_views(points, occl, cameras, prompts=prompts,
                          dilation_px=config.dilation_px)

    plan = config.stages[stage]
    if stage == "inpaint":
        cloud = read_ply(paths.initial)
    else:
        cloud = read_ply(paths.scene_ply("inpaint"))
    state = None
    ck = paths.checkpoint(stage)
    if ck.is_file():
        cloud, state = load_checkpoint(ck)
        remaining = plan.iterations - state.step
        if remaining <= 0:
            _LOG.info("%s already ran %d steps; nothing to do", stage,
                      state.step)
            write_ply(cloud, paths.scene_ply(stage))
            return paths
        plan = dataclasses.replace(plan, iterations=remaining)
        _LOG.info("resuming %s at step %d (%d to go)", stage, state.step,
                  remaining)
    rng = np.random.default_rng(
        [config.seed, STAGE_SEEDS[stage], state.step if state else 0])

    last = {}

    def progress(record):
        last["state"] = record["state"]
        it = record["iteration"]
        if it % LOG_EVERY == 0 or it + 1 == plan.iterations:
            _LOG.info("%s step %d/%d loss %.5f", stage, it + 1,
                      plan.iterations, record["loss"])

    if stage == "inpaint":
        trained = run_inpaint_stage(cloud, views, plan, backends.inpaint,
                                    backends.depth, backends.codec, rng,
                                    state=state, hooks=progress)
    else:
        depth = backends.depth if plan.weights.lambda_depth != 0.0 else None
        trained = run_refine_stage(cloud, views, plan, backends.text,
                                   backends.codec, rng, depth=depth,
                                   state=state, hooks=progress)

    ck.parent.mkdir(parents=True, exist_ok=True)
    final_state = last.get("state")
    if final_state is None:
        # zero-iteration plan: nothing ran, record an untouched state
        from .trainer import TrainState
        final_state = state if state is not None else TrainState.fresh(trained)
    save_checkpoint(ck, trained, final_state)
    write_ply(trained, paths.scene_ply(stage))
    _LOG.info("%s stage complete: %d splats -> %s", stage, len(trained),
              paths.scene_ply(stage))
    return paths


def cmd_render(config: PipelineConfig, poses_path=None):
    """Render every pose in the trajectory from the latest scene.

    Before any training ran, this rasterizes the initial point cloud
    through the same code path that produced the training anchors, so
    the reference render reproduces them exactly.
    """
    paths = Artifacts(config.output_dir)
    source, stage = paths.latest_scene()
    if source is None:
        raise StageOrderError("nothing to render; run init first")
    poses = read_poses(poses_path if poses_path is not None else paths.poses)
    out_dir = paths.render_dir()
    out_dir.mkdir(parents=True, exist_ok=True)

    points = None
    cloud = None
    if stage == "init":
        points = read_point_ply(paths.pointcloud)
    else:
        cloud = read_ply(source)

    manifest = {}
    for pose in poses:
        if points is not None:
            color, depth, _, _ = rasterize_points(points.positions,
                                                  points.colors, pose.camera)
        else:
            out = render(cloud, pose.camera)
            color, depth = out.color, out.depth
        png = out_dir / f"{pose.id}.png"
        npy = out_dir / f"{pose.id}_depth.npy"
        write_png(png, color)
        write_depth(npy, depth)
        manifest[pose.id] = (png, npy)
    _LOG.info("rendered %d poses from the %s cloud into %s", len(poses),
              stage, out_dir)
    return manifest
