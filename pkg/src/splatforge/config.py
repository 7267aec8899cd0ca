"""Pipeline configuration: one JSON file describing a whole run.

Every stage hyperparameter is surfaced with its default pre-filled, so a
minimal config only names a scene source, a prompt, and an output
directory. Denoiser backends are strings: "mock:<name>" for in-process
models or an http(s) URL for the wire protocol.
"""
import dataclasses
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError
from .losses import LossWeights
from .mocks import (GroundTruthDepth, IdentityCodec, NonlinearDenoiser,
                    SceneOracle, ZeroDenoiser)
from .scene import Camera
from .synthetic import entrance_camera, room_scene, two_plane_scene
from .trainer import (DensifyConfig, LrSchedule, StagePlan, inpaint_plan,
                      refine_plan)
from .wire import RemoteClient, RemoteCodec, RemoteDenoiser, RemoteDepth

BACKEND_ROLES = ("inpaint", "text", "depth", "codec")

DEFAULT_BACKENDS = {
    "inpaint": "mock:oracle",
    "text": "mock:oracle",
    "depth": "mock:ground-truth",
    "codec": "mock:identity",
}

WEIGHT_KEYS = {
    "latent": "lambda_latent", "image": "lambda_image",
    "lpips": "lambda_lpips", "anchor": "lambda_anchor",
    "depth": "lambda_depth", "opacity": "lambda_opacity",
}


def synthetic_fixture(name, width=64, height=64):
    """Build a named synthetic scene and its default reference camera."""
    if name == "two_room":
        return room_scene(), entrance_camera(width, height)
    if name == "two_plane":
        f = 45.0 * (width / 32.0)
        cam = Camera(fx=f, fy=f * (height / width), cx=width / 2.0,
                     cy=height / 2.0, width=width, height=height,
                     cam_to_world=np.eye(4))
        return two_plane_scene(), cam
    raise ConfigError(f"unknown synthetic scene {name!r}; "
                      f"choose from ('two_room', 'two_plane')")


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    """Validated run description; paths are resolved to absolute."""

    prompt: str
    output_dir: Path
    synthetic: str | None
    reference_image: Path | None
    camera: Camera | None          # None means the fixture's default view
    aux_offsets: tuple
    aux_prompts: tuple
    grid_resolution: int
    seed: int
    backends: dict
    stages: dict                   # {"inpaint": StagePlan, "refine": StagePlan}
    dilation_px: int | None
    frontend_dir: Path | None

    def scene_and_camera(self):
        """Resolve the scene source: (QuadScene or None, reference Camera)."""
        if self.synthetic is not None:
            width = self.camera.width if self.camera is not None else 64
            height = self.camera.height if self.camera is not None else 64
            scene, default_cam = synthetic_fixture(self.synthetic, width,
                                                   height)
            return scene, self.camera if self.camera is not None else default_cam
        return None, self.camera


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)


def parse_config(text, base_dir="."):
    base_dir = Path(base_dir)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config top level must be an object")
    known = {"prompt", "output_dir", "scene", "camera", "aux",
             "grid_resolution", "seed", "denoisers", "stages",
             "dilation_px", "frontend_dir"}
    _reject_unknown(doc, known, "config")

    prompt = doc.get("prompt")
    if not isinstance(prompt, str) or not prompt:
        raise ConfigError("'prompt' must be a nonempty string")
    out = doc.get("output_dir")
    if not isinstance(out, str) or not out:
        raise ConfigError("'output_dir' must be a nonempty string")
    output_dir = (base_dir / out).resolve()

    synthetic, reference_image = _parse_scene(doc.get("scene"), base_dir)
    camera = _parse_camera(doc.get("camera"))
    if synthetic is None and camera is None:
        raise ConfigError("'camera' is required when rendering from an image")

    aux_offsets, aux_prompts = _parse_aux(doc.get("aux", []), prompt)

    grid_resolution = doc.get("grid_resolution", 32)
    if not isinstance(grid_resolution, int) or not 2 <= grid_resolution <= 512:
        raise ConfigError("'grid_resolution' must be an integer in [2, 512]")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("'seed' must be a nonnegative integer")

    backends = dict(DEFAULT_BACKENDS)
    spec = doc.get("denoisers", {})
    if not isinstance(spec, dict):
        raise ConfigError("'denoisers' must be an object")
    _reject_unknown(spec, set(BACKEND_ROLES), "denoisers")
    for role, value in spec.items():
        if not isinstance(value, str) or not (
                value.startswith("mock:") or value.startswith("http://")
                or value.startswith("https://")):
            raise ConfigError(
                f"denoisers.{role} must be 'mock:<name>' or an http(s) URL, "
                f"got {value!r}")
        backends[role] = value

    stages = {
        "inpaint": _parse_stage("inpaint", inpaint_plan(),
                                doc.get("stages", {}).get("inpaint", {})),
        "refine": _parse_stage("refine", refine_plan(),
                               doc.get("stages", {}).get("refine", {})),
    }
    if isinstance(doc.get("stages"), dict):
        _reject_unknown(doc["stages"], {"inpaint", "refine"}, "stages")
    elif "stages" in doc:
        raise ConfigError("'stages' must be an object")

    dilation_px = doc.get("dilation_px")
    if dilation_px is not None and (not isinstance(dilation_px, int)
                                    or dilation_px < 0):
        raise ConfigError("'dilation_px' must be a nonnegative integer")

    frontend_dir = doc.get("frontend_dir")
    if frontend_dir is not None:
        if not isinstance(frontend_dir, str):
            raise ConfigError("'frontend_dir' must be a string")
        frontend_dir = (base_dir / frontend_dir).resolve()

    return PipelineConfig(
        prompt=prompt, output_dir=output_dir, synthetic=synthetic,
        reference_image=reference_image, camera=camera,
        aux_offsets=aux_offsets, aux_prompts=aux_prompts,
        grid_resolution=grid_resolution, seed=seed, backends=backends,
        stages=stages, dilation_px=dilation_px, frontend_dir=frontend_dir)


def _reject_unknown(obj, known, where):
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {unknown}")


def _parse_scene(scene, base_dir):
    if not isinstance(scene, dict) or len(scene) != 1:
        raise ConfigError(
            "'scene' must be {\"synthetic\": name} or "
            "{\"reference_image\": path}")
    if "synthetic" in scene:
        name = scene["synthetic"]
        synthetic_fixture(name)   # validates the name
        return name, None
    if "reference_image" in scene:
        rel = scene["reference_image"]
        if not isinstance(rel, str) or not rel:
            raise ConfigError("'scene.reference_image' must be a path string")
        path = (base_dir / rel).resolve()
        if not path.is_file():
            raise ConfigError(f"reference image does not exist: {path}")
        return None, path
    raise ConfigError("'scene' must name 'synthetic' or 'reference_image'")


def _parse_camera(cam):
    if cam is None:
        return None
    if not isinstance(cam, dict):
        raise ConfigError("'camera' must be an object")
    _reject_unknown(cam, {"fx", "fy", "cx", "cy", "width", "height",
                          "cam_to_world"}, "camera")
    required = ("fx", "fy", "cx", "cy", "width", "height")
    missing = sorted(set(required) - set(cam))
    if missing:
        raise ConfigError(f"camera missing keys: {missing}")
    for key in ("fx", "fy", "cx", "cy"):
        if not isinstance(cam[key], (int, float)) or not np.isfinite(cam[key]):
            raise ConfigError(f"camera.{key} must be a finite number")
    for key in ("width", "height"):
        if not isinstance(cam[key], int) or cam[key] <= 0:
            raise ConfigError(f"camera.{key} must be a positive integer")
    pose = cam.get("cam_to_world", [float(v) for v in np.eye(4).ravel()])
    if not isinstance(pose, list) or len(pose) != 16:
        raise ConfigError("camera.cam_to_world must be 16 floats row-major")
    try:
        return Camera(fx=float(cam["fx"]), fy=float(cam["fy"]),
                      cx=float(cam["cx"]), cy=float(cam["cy"]),
                      width=cam["width"], height=cam["height"],
                      cam_to_world=np.array(pose, dtype=np.float64)
                      .reshape(4, 4))
    except ValidationError as exc:
        raise ConfigError(f"camera: {exc}") from exc


def _parse_aux(aux, default_prompt):
    if not isinstance(aux, list):
        raise ConfigError("'aux' must be a list of {offset, prompt?}")
    offsets, prompts = [], []
    for ix, entry in enumerate(aux):
        if not isinstance(entry, dict):
            raise ConfigError(f"aux[{ix}] must be an object")
        _reject_unknown(entry, {"offset", "prompt"}, f"aux[{ix}]")
        off = entry.get("offset")
        if not isinstance(off, (int, float)) or not np.isfinite(off):
            raise ConfigError(f"aux[{ix}].offset must be a finite number")
        p = entry.get("prompt", default_prompt)
        if not isinstance(p, str) or not p:
            raise ConfigError(f"aux[{ix}].prompt must be a nonempty string")
        offsets.append(float(off))
        prompts.append(p)
    return tuple(offsets), tuple(prompts)


def _parse_stage(name, plan: StagePlan, overrides):
    if not isinstance(overrides, dict):
        raise ConfigError(f"stages.{name} must be an object")
    known = {"iterations", "model", "t_range", "guidance", "weights", "lr",
             "sample_steps", "use_inversion", "sharpen", "depth_every",
             "densify", "densify_every"}
    _reject_unknown(overrides, known, f"stages.{name}")
    fields = {}
    ints = ("iterations", "sample_steps", "depth_every", "densify_every")
    for key in ints:
        if key in overrides:
            if not isinstance(overrides[key], int):
                raise ConfigError(f"stages.{name}.{key} must be an integer")
            fields[key] = overrides[key]
    for key in ("use_inversion", "sharpen"):
        if key in overrides:
            if not isinstance(overrides[key], bool):
                raise ConfigError(f"stages.{name}.{key} must be a boolean")
            fields[key] = overrides[key]
    if "model" in overrides:
        fields["model"] = overrides["model"]
    if "t_range" in overrides:
        rng = overrides["t_range"]
        if not isinstance(rng, list) or len(rng) != 2:
            raise ConfigError(f"stages.{name}.t_range must be [low, high]")
        fields["t_range"] = (float(rng[0]), float(rng[1]))
    if "guidance" in overrides:
        g = overrides["guidance"]
        if not isinstance(g, dict):
            raise ConfigError(f"stages.{name}.guidance must be an object")
        _reject_unknown(g, {"image", "text"}, f"stages.{name}.guidance")
        fields["guidance"] = dataclasses.replace(
            plan.guidance, **{k: float(v) for k, v in g.items()})
    if "weights" in overrides:
        w = overrides["weights"]
        if not isinstance(w, dict):
            raise ConfigError(f"stages.{name}.weights must be an object")
        _reject_unknown(w, set(WEIGHT_KEYS), f"stages.{name}.weights")
        mapped = {}
        for short, value in w.items():
            if not isinstance(value, (int, float)):
                raise ConfigError(
                    f"stages.{name}.weights.{short} must be a number")
            mapped[WEIGHT_KEYS[short]] = float(value)
        fields["weights"] = dataclasses.replace(plan.weights, **mapped)
    if "lr" in overrides:
        fields["lr"] = _parse_lr(name, plan.lr, overrides["lr"])
    if "densify" in overrides:
        fields["densify"] = _parse_densify(name, overrides["densify"])
    try:
        return dataclasses.replace(plan, **fields)
    except ValidationError as exc:
        raise ConfigError(f"stages.{name}: {exc}") from exc


def _parse_lr(name, defaults, spec):
    if not isinstance(spec, dict):
        raise ConfigError(f"stages.{name}.lr must be an object")
    _reject_unknown(spec, set(defaults), f"stages.{name}.lr")
    merged = dict(defaults)
    for param, value in spec.items():
        if isinstance(value, (int, float)):
            schedule = LrSchedule.constant(float(value))
        elif isinstance(value, dict):
            _reject_unknown(value, {"initial", "final", "decay_steps",
                                    "warmup_steps"},
                            f"stages.{name}.lr.{param}")
            if "initial" not in value:
                raise ConfigError(
                    f"stages.{name}.lr.{param} needs 'initial'")
            schedule = LrSchedule(
                initial=float(value["initial"]),
                final=(float(value["final"]) if "final" in value else None),
                decay_steps=int(value.get("decay_steps", 0)),
                warmup_steps=int(value.get("warmup_steps", 0)))
        else:
            raise ConfigError(
                f"stages.{name}.lr.{param} must be a number or an object")
        merged[param] = schedule
    return merged


def _parse_densify(name, spec):
    if spec is None:
        return None
    if not isinstance(spec, dict):
        raise ConfigError(f"stages.{name}.densify must be an object or null")
    _reject_unknown(spec, {"grad_threshold", "prune_opacity", "max_splats",
                           "split_factor"}, f"stages.{name}.densify")
    kwargs = {}
    for key in ("grad_threshold", "prune_opacity", "split_factor"):
        if key in spec:
            kwargs[key] = float(spec[key])
    if "max_splats" in spec and spec["max_splats"] is not None:
        kwargs["max_splats"] = int(spec["max_splats"])
    try:
        return DensifyConfig(**kwargs)
    except ValidationError as exc:
        raise ConfigError(f"stages.{name}.densify: {exc}") from exc


# --- backend construction ---------------------------------------------------

@dataclasses.dataclass
class Backends:
    """Instantiated models for one run."""

    inpaint: object
    text: object
    depth: object
    codec: object


def build_backends(config: PipelineConfig, scene=None, force_mocks=False):
    """Turn backend spec strings into model objects.

    scene is the synthetic QuadScene when one exists; oracle mocks need
    it. force_mocks replaces remote endpoints with the default mock set.
    """
    spec = dict(config.backends)
    if force_mocks:
        spec = dict(DEFAULT_BACKENDS)
    clients = {}

    def client_for(url):
        if url not in clients:
            clients[url] = RemoteClient(url)
        return clients[url]

    def denoiser(role):
        value = spec[role]
        if value.startswith("mock:"):
            name = value[5:]
            if name == "oracle":
                if scene is None:
                    raise ConfigError(
                        f"denoisers.{role} = 'mock:oracle' needs a synthetic "
                        f"scene")
                return SceneOracle(scene)
            if name == "zero":
                return ZeroDenoiser()
            if name == "nonlinear":
                return NonlinearDenoiser()
            raise ConfigError(f"unknown mock denoiser {name!r} for {role}")
        return RemoteDenoiser(client_for(value), model=role)

    def depth():
        value = spec["depth"]
        if value.startswith("mock:"):
            name = value[5:]
            if name == "ground-truth":
                if scene is None:
                    raise ConfigError(
                        "denoisers.depth = 'mock:ground-truth' needs a "
                        "synthetic scene")
                return GroundTruthDepth(scene)
            raise ConfigError(f"unknown mock depth provider {name!r}")
        return RemoteDepth(client_for(value))

    def codec():
        value = spec["codec"]
        if value.startswith("mock:"):
            name = value[5:]
            if name == "identity":
                return IdentityCodec()
            raise ConfigError(f"unknown mock codec {name!r}")
        return RemoteCodec(client_for(value))

    return Backends(inpaint=denoiser("inpaint"), text=denoiser("text"),
                    depth=depth(), codec=codec())
