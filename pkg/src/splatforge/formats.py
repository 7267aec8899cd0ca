"""File formats: splat PLY, point PLY, pose JSON, PNG images, npy depth.

The splat layout follows the field names third-party viewers expect:
x,y,z, f_dc_0..2, opacity (logit), scale_0..2 (log), rot_0..3, all
little-endian float32. Color maps to the DC coefficient via
c = 0.5 + C0 * f_dc. That grid is coarser than the f32 color grid for
dark colors (|f_dc| > ~0.9), so the first write quantizes such colors
by at most ~3.4e-8; every later round trip is bitwise. The remaining
eleven fields are stored verbatim and always round trip bitwise.
"""
import dataclasses
import json

import numpy as np
from PIL import Image

from .errors import (MalformedPly, MalformedPoseFile, MissingRefPose,
                     NonRigidTransform, ShapeMismatch, ValidationError)
from .scene import Camera, PointCloud, SplatCloud

SH_C0 = 0.28209479177387814

SPLAT_FIELDS = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2",
                "rot_0", "rot_1", "rot_2", "rot_3")

POSE_ROLES = ("ref", "aux", "train", "eval")


def color_to_dc(color):
    """Encode f32 colors as DC coefficients whose decode is bitwise exact.

    The rounded inverse can land one step away from an exact preimage,
    and decode_dc is not injective for bright colors, so nudge each
    coefficient until it decodes back to the input. Colors outside the
    representable grid (dark ones) settle on the nearest neighbor.
    """
    color = np.asarray(color, dtype=np.float32)
    f_dc = ((color.astype(np.float64) - 0.5) / SH_C0).astype(np.float32)
    for _ in range(8):
        back = dc_to_color(f_dc)
        bad = back != color
        if not bad.any():
            break
        toward = np.where(back[bad] > color[bad], np.float32(-np.inf),
                          np.float32(np.inf))
        f_dc[bad] = np.nextafter(f_dc[bad], toward)
    return f_dc


def dc_to_color(f_dc):
    f_dc = np.asarray(f_dc, dtype=np.float32)
    return (0.5 + SH_C0 * f_dc.astype(np.float64)).astype(np.float32)


def write_ply(cloud: SplatCloud, path):
    """Write a splat cloud as binary little-endian PLY. Returns path."""
    n = len(cloud)
    rows = np.empty(n, dtype=[(f, "<f4") for f in SPLAT_FIELDS])
    mu = np.asarray(cloud.mu, dtype=np.float32)
    f_dc = color_to_dc(cloud.color)
    log_scale = np.asarray(cloud.log_scale, dtype=np.float32)
    quat = np.asarray(cloud.quat, dtype=np.float32)
    for i, axis in enumerate("xyz"):
        rows[axis] = mu[:, i]
    for i in range(3):
        rows[f"f_dc_{i}"] = f_dc[:, i]
        rows[f"scale_{i}"] = log_scale[:, i]
    rows["opacity"] = np.asarray(cloud.opacity_logit, dtype=np.float32)
    for i in range(4):
        rows[f"rot_{i}"] = quat[:, i]
    header = _ply_header(n, SPLAT_FIELDS)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rows.tobytes())
    return path


def read_ply(path) -> SplatCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    count, fields, body_start = _parse_ply_header(raw)
    missing = [f for f in SPLAT_FIELDS if f not in fields]
    if missing:
        raise MalformedPly(f"missing vertex properties: {missing}",
                           offset=body_start)
    stride = 4 * len(fields)
    need = count * stride
    if len(raw) - body_start < need:
        raise MalformedPly(
            f"body truncated: need {need} bytes for {count} vertices, "
            f"have {len(raw) - body_start}", offset=len(raw))
    dtype = np.dtype([(f, "<f4") for f in fields])
    rows = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
    mu = np.stack([rows["x"], rows["y"], rows["z"]], axis=1)
    f_dc = np.stack([rows[f"f_dc_{i}"] for i in range(3)], axis=1)
    log_scale = np.stack([rows[f"scale_{i}"] for i in range(3)], axis=1)
    quat = np.stack([rows[f"rot_{i}"] for i in range(4)], axis=1)
    return SplatCloud(mu=mu, log_scale=log_scale, quat=quat,
                      opacity_logit=np.array(rows["opacity"]),
                      color=dc_to_color(f_dc))


def _ply_header(count, fields, types=None):
    lines = ["ply", "format binary_little_endian 1.0",
             f"element vertex {count}"]
    for i, f in enumerate(fields):
        kind = types[i] if types is not None else "float"
        lines.append(f"property {kind} {f}")
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _parse_ply_header(raw, allow_uchar_color=False):
    """Return (vertex count, field names in order, body byte offset).

    Tolerates extra float properties and any property order so files
    from other tools still load; anything else is rejected with the
    byte offset where parsing stopped.
    """
    offset = 0
    lines = []
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise MalformedPly("header has no end_header line",
                               offset=len(raw))
        line = raw[offset:end].decode("ascii", errors="replace").strip()
        if line == "end_header":
            body_start = end + 1
            break
        lines.append((offset, line))
        offset = end + 1
        if offset > 65536:
            raise MalformedPly("header longer than 64 KiB", offset=offset)
    if not lines or lines[0][1] != "ply":
        raise MalformedPly("not a PLY file (missing 'ply' magic)", offset=0)
    fields = []
    types = []
    count = None
    in_vertex = False
    for at, line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise MalformedPly(f"unsupported format {parts[1:]}",
                                   offset=at)
        elif parts[0] == "element":
            if parts[1] == "vertex":
                in_vertex = True
                try:
                    count = int(parts[2])
                except (IndexError, ValueError):
                    raise MalformedPly(f"bad element line {line!r}",
                                       offset=at) from None
                if count < 0:
                    raise MalformedPly(f"negative vertex count {count}",
                                       offset=at)
            else:
                in_vertex = False
        elif parts[0] == "property" and in_vertex:
            if len(parts) != 3:
                raise MalformedPly(f"bad property line {line!r}", offset=at)
            kind, name = parts[1], parts[2]
            allowed = ("float", "float32")
            if allow_uchar_color:
                allowed += ("uchar", "uint8")
            if kind not in allowed:
                raise MalformedPly(
                    f"property {name!r} has unsupported type {kind!r}",
                    offset=at)
            fields.append(name)
            types.append(kind)
    if count is None:
        raise MalformedPly("no vertex element declared", offset=body_start)
    if allow_uchar_color:
        return count, fields, types, body_start
    return count, fields, body_start


def write_point_ply(points: PointCloud, path):
    """Write a colored point cloud (float xyz + 8-bit rgb). Returns path."""
    n = len(points)
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    rows = np.empty(n, dtype=dtype)
    pos = np.asarray(points.positions, dtype=np.float32)
    rgb = np.clip(np.rint(np.asarray(points.colors, dtype=np.float64) * 255),
                  0, 255).astype(np.uint8)
    for i, axis in enumerate("xyz"):
        rows[axis] = pos[:, i]
    for i, chan in enumerate(("red", "green", "blue")):
        rows[chan] = rgb[:, i]
    header = _ply_header(n, ("x", "y", "z", "red", "green", "blue"),
                         types=("float",) * 3 + ("uchar",) * 3)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rows.tobytes())
    return path


def read_point_ply(path) -> PointCloud:
    """Read a point PLY back; colors return as f32 in [0,1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    count, fields, types, body_start = _parse_ply_header(
        raw, allow_uchar_color=True)
    for name in ("x", "y", "z", "red", "green", "blue"):
        if name not in fields:
            raise MalformedPly(f"missing property {name!r}",
                               offset=body_start)
    np_types = {"float": "<f4", "float32": "<f4", "uchar": "u1", "uint8": "u1"}
    dtype = np.dtype([(f, np_types[t]) for f, t in zip(fields, types)])
    need = count * dtype.itemsize
    if len(raw) - body_start < need:
        raise MalformedPly(
            f"body truncated: need {need} bytes for {count} vertices, "
            f"have {len(raw) - body_start}", offset=len(raw))
    rows = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
    pos = np.stack([rows["x"], rows["y"], rows["z"]], axis=1)
    rgb = np.stack([rows["red"], rows["green"], rows["blue"]], axis=1)
    return PointCloud(pos, rgb.astype(np.float32) / 255.0,
                      np.zeros(count, dtype=np.int32))


# --- pose trajectories ------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Pose:
    """A named camera with a role in the pipeline."""

    id: str
    role: str
    camera: Camera

    def __post_init__(self):
        if self.role not in POSE_ROLES:
            raise MalformedPoseFile(
                f"pose {self.id!r}: role must be one of {POSE_ROLES}, "
                f"got {self.role!r}")


def validate_poses(poses):
    """Shared invariant: exactly one reference pose, unique ids."""
    refs = [p for p in poses if p.role == "ref"]
    if len(refs) != 1:
        raise MissingRefPose(
            f"pose set must contain exactly one 'ref' pose, found {len(refs)}")
    ids = [p.id for p in poses]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise MalformedPoseFile(f"duplicate pose ids: {dupes}")
    return list(poses)


def write_poses(poses, path):
    """Write poses as JSON after validating them. Returns path."""
    validate_poses(poses)
    entries = []
    for p in poses:
        cam = p.camera
        entries.append({
            "id": p.id,
            "role": p.role,
            "cam_to_world": [float(v) for v in cam.cam_to_world.ravel()],
            "fx": float(cam.fx), "fy": float(cam.fy),
            "cx": float(cam.cx), "cy": float(cam.cy),
            "width": int(cam.width), "height": int(cam.height),
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"poses": entries}, fh, indent=2)
        fh.write("\n")
    return path


def read_poses(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_poses(text)


def parse_poses(text):
    """Parse and validate a pose file from its JSON text."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedPoseFile(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("poses"), list):
        raise MalformedPoseFile("top level must be {\"poses\": [...]}")
    poses = []
    for ix, entry in enumerate(doc["poses"]):
        poses.append(_parse_pose_entry(ix, entry))
    return validate_poses(poses)


def _parse_pose_entry(ix, entry):
    if not isinstance(entry, dict):
        raise MalformedPoseFile(f"pose {ix}: entry must be an object")
    required = {"id", "role", "cam_to_world", "fx", "fy", "cx", "cy",
                "width", "height"}
    missing = sorted(required - set(entry))
    if missing:
        raise MalformedPoseFile(f"pose {ix}: missing keys {missing}")
    pid = entry["id"]
    if not isinstance(pid, str) or not pid:
        raise MalformedPoseFile(f"pose {ix}: id must be a nonempty string")
    mat = entry["cam_to_world"]
    if not isinstance(mat, list) or len(mat) != 16:
        raise MalformedPoseFile(
            f"pose {pid!r}: cam_to_world must be 16 floats row-major")
    numbers = {k: entry[k] for k in ("fx", "fy", "cx", "cy")}
    for key, val in numbers.items():
        if not isinstance(val, (int, float)) or not np.isfinite(val):
            raise MalformedPoseFile(f"pose {pid!r}: {key} must be finite")
    for key in ("width", "height"):
        if not isinstance(entry[key], int):
            raise MalformedPoseFile(f"pose {pid!r}: {key} must be an integer")
    try:
        cam = Camera(fx=entry["fx"], fy=entry["fy"],
                     cx=entry["cx"], cy=entry["cy"],
                     width=entry["width"], height=entry["height"],
                     cam_to_world=np.array(mat, dtype=np.float64).reshape(4, 4))
    except NonRigidTransform as exc:
        raise NonRigidTransform(f"pose {pid!r}: {exc}") from exc
    except (ShapeMismatch, ValidationError) as exc:
        raise MalformedPoseFile(f"pose {pid!r}: {exc}") from exc
    return Pose(id=pid, role=entry["role"], camera=cam)


# --- images -----------------------------------------------------------------

def write_png(path, image):
    """Save an f32 image in [0,1] (H,W) or (H,W,3) as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ShapeMismatch(f"expected (H,W) or (H,W,3), got {arr.shape}")
    u8 = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="L" if arr.ndim == 2 else "RGB").save(path)
    return path


def read_png(path):
    """Load a PNG as f32 in [0,1]; grayscale stays (H,W)."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img)
    return arr.astype(np.float32) / 255.0


def write_depth(path, depth):
    """Depth maps keep full precision: f32 npy, not PNG."""
    np.save(path, np.asarray(depth, dtype=np.float32))
    return path


def read_depth(path):
    return np.load(path)
