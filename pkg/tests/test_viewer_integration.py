"""Browser pose-capture client driven end to end against a live server.

Runs the actual built viewer modules under node: fetch the scene
through the real PLY parser, capture one ref and two train poses,
save them, then prove the engine renders exactly those viewpoints.
Skipped when node or the frontend build is absent; nothing else in
the suite depends on either.
"""
import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from splatforge.config import parse_config
from splatforge.formats import parse_poses, read_poses, write_poses
from splatforge.pipeline import cmd_init, cmd_render
from splatforge.server import ViewerServer

FRONTEND = Path(__file__).resolve().parents[1] / "frontend"
CAPTURE = FRONTEND / "scripts" / "capture-poses.mjs"
NODE = shutil.which("node")

pytestmark = pytest.mark.skipif(
    NODE is None or not (FRONTEND / "dist" / "session.js").exists(),
    reason="needs node and a built frontend/dist")


def test_browser_capture_round_trips_into_renders(tmp_path):
    doc = {"prompt": "p", "output_dir": "out",
           "scene": {"synthetic": "two_plane"}, "seed": 0}
    config = parse_config(json.dumps(doc), base_dir=tmp_path)
    cmd_init(config)

    server = ViewerServer(config, port=0).start()
    try:
        proc = subprocess.run(
            [NODE, str(CAPTURE), f"http://127.0.0.1:{server.port}"],
            capture_output=True, text=True, timeout=120)
    finally:
        server.stop()
    assert proc.returncode == 0, proc.stderr

    # what the client says it captured, through the engine's own parser
    claimed = parse_poses(proc.stdout)
    assert [p.role for p in claimed] == ["ref", "train", "train"]

    # the saved trajectory holds exactly those poses
    saved = read_poses(tmp_path / "out" / "poses.json")
    assert [p.id for p in saved] == [p.id for p in claimed]
    for got, want in zip(saved, claimed):
        assert np.max(np.abs(np.asarray(got.camera.cam_to_world)
                             - np.asarray(want.camera.cam_to_world))) < 1e-6
        for field in ("fx", "fy", "cx", "cy", "width", "height"):
            assert getattr(got.camera, field) == getattr(want.camera, field)

    # intrinsics were adopted from the engine's reference camera
    ref = next(p for p in saved if p.role == "ref")
    assert (ref.camera.width, ref.camera.height) == (64, 64)
    assert ref.camera.fx == 90.0

    # renders from the saved file match renders from the client's own
    # matrices byte for byte: the engine draws exactly the captured views
    manifest = cmd_render(config)
    assert set(manifest) == {p.id for p in claimed}
    from_saved = {pid: (png.read_bytes(), npy.read_bytes())
                  for pid, (png, npy) in manifest.items()}
    alt = tmp_path / "claimed_poses.json"
    write_poses(claimed, alt)
    for pid, (png, npy) in cmd_render(config, poses_path=alt).items():
        assert png.read_bytes() == from_saved[pid][0]
        assert npy.read_bytes() == from_saved[pid][1]

    # the captured views actually see the scene
    for pid, (_, npy) in manifest.items():
        assert (np.load(npy) > 0).any(), f"{pid} renders empty space"
