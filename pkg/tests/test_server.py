"""Viewer API: scene download, pose round trip, static assets."""
import http.client
import json

import numpy as np
import pytest
import requests

from splatforge import server as server_mod
from splatforge.config import parse_config
from splatforge.formats import Pose, read_poses, write_poses
from splatforge.pipeline import Artifacts
from splatforge.scene import Camera
from splatforge.server import ViewerServer

IDENTITY = [float(v) for v in np.eye(4).ravel()]


def make_config(tmp_path, **extra):
    doc = {"prompt": "p", "output_dir": "out",
           "scene": {"synthetic": "two_plane"}}
    doc.update(extra)
    return parse_config(json.dumps(doc), base_dir=tmp_path)


def pose_entry(pose_id, role="train", x=0.0):
    mat = list(IDENTITY)
    mat[3] = x
    return {"id": pose_id, "role": role, "cam_to_world": mat,
            "fx": 10.0, "fy": 10.0, "cx": 4.0, "cy": 4.0,
            "width": 8, "height": 8}


def ref_pose(pose_id="ref"):
    cam = Camera(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8,
                 cam_to_world=np.eye(4))
    return Pose(id=pose_id, role="ref", camera=cam)


@pytest.fixture
def api(tmp_path, monkeypatch):
    """Started server over an empty output dir, no frontend build."""
    monkeypatch.setattr(server_mod, "default_frontend_dir", lambda: None)
    config = make_config(tmp_path)
    server = ViewerServer(config, port=0).start()
    base = f"http://127.0.0.1:{server.port}"
    yield base, Artifacts(config.output_dir)
    server.stop()


class TestSceneRoute:
    def test_404_before_init(self, api):
        base, _ = api
        resp = requests.get(f"{base}/api/scene.ply")
        assert resp.status_code == 404
        assert resp.json()["error"] == "NoScene"

    def test_serves_most_advanced_stage(self, api):
        base, paths = api
        paths.init_dir.mkdir(parents=True)
        paths.initial.write_bytes(b"init-cloud")
        resp = requests.get(f"{base}/api/scene.ply")
        assert resp.status_code == 200
        assert resp.content == b"init-cloud"
        assert resp.headers["X-Scene-Stage"] == "init"
        assert resp.headers["Content-Type"] == "application/octet-stream"

        paths.scene_ply("inpaint").parent.mkdir(parents=True)
        paths.scene_ply("inpaint").write_bytes(b"inpaint-cloud")
        resp = requests.get(f"{base}/api/scene.ply")
        assert resp.content == b"inpaint-cloud"
        assert resp.headers["X-Scene-Stage"] == "inpaint"

        paths.scene_ply("refine").parent.mkdir(parents=True)
        paths.scene_ply("refine").write_bytes(b"refine-cloud")
        resp = requests.get(f"{base}/api/scene.ply")
        assert resp.content == b"refine-cloud"
        assert resp.headers["X-Scene-Stage"] == "refine"


class TestPoseRoutes:
    def test_404_before_init(self, api):
        base, _ = api
        resp = requests.get(f"{base}/api/poses")
        assert resp.status_code == 404
        assert resp.json()["error"] == "NoPoses"

    def test_get_returns_file_bytes(self, api):
        base, paths = api
        paths.root.mkdir(parents=True, exist_ok=True)
        write_poses([ref_pose()], paths.poses)
        resp = requests.get(f"{base}/api/poses")
        assert resp.status_code == 200
        assert resp.content == paths.poses.read_bytes()

    def test_post_replaces_trajectory(self, api):
        base, paths = api
        paths.root.mkdir(parents=True, exist_ok=True)
        write_poses([ref_pose()], paths.poses)
        body = json.dumps({"poses": [pose_entry("ref", "ref"),
                                     pose_entry("orbit1", "train", 0.5),
                                     pose_entry("orbit2", "train", 1.0)]})
        resp = requests.post(f"{base}/api/poses", data=body)
        assert resp.status_code == 200
        assert resp.json() == {"ok": True, "count": 3}
        assert paths.poses.read_bytes() == body.encode("utf-8")
        poses = read_poses(paths.poses)
        assert [p.id for p in poses] == ["ref", "orbit1", "orbit2"]
        assert poses[1].camera.cam_to_world[0, 3] == 0.5

    def test_post_creates_file_when_absent(self, api):
        base, paths = api
        body = json.dumps({"poses": [pose_entry("ref", "ref")]})
        resp = requests.post(f"{base}/api/poses", data=body)
        assert resp.status_code == 200
        assert paths.poses.is_file()

    @pytest.mark.parametrize("body, error", [
        (json.dumps({"poses": [pose_entry("a", "ref"),
                               pose_entry("b", "ref")]}), "MissingRefPose"),
        (json.dumps({"poses": [pose_entry("a", "train")]}), "MissingRefPose"),
        (json.dumps({"poses": [pose_entry("a", "ref"),
                               pose_entry("a", "train")]}),
         "MalformedPoseFile"),
        ("{not json", "MalformedPoseFile"),
        (b"\xff\xfe\x00", "UnicodeDecodeError"),
    ])
    def test_post_rejects_invalid_and_keeps_file(self, api, body, error):
        base, paths = api
        paths.root.mkdir(parents=True, exist_ok=True)
        write_poses([ref_pose()], paths.poses)
        before = paths.poses.read_bytes()
        resp = requests.post(f"{base}/api/poses", data=body)
        assert resp.status_code == 422
        assert resp.json()["error"] == error
        assert paths.poses.read_bytes() == before

    def test_post_unknown_route(self, api):
        base, _ = api
        resp = requests.post(f"{base}/api/scene.ply", data=b"x")
        assert resp.status_code == 404


class TestStatic:
    @pytest.fixture
    def site(self, tmp_path):
        front = tmp_path / "front"
        front.mkdir()
        (front / "index.html").write_text("<h1>viewer</h1>")
        (front / "app.js").write_text("console.log(1)")
        (tmp_path / "secret.txt").write_text("keep out")
        config = make_config(tmp_path, frontend_dir="front")
        server = ViewerServer(config, port=0).start()
        yield f"http://127.0.0.1:{server.port}", server.port
        server.stop()

    def test_root_serves_index(self, site):
        base, _ = site
        resp = requests.get(base + "/")
        assert resp.status_code == 200
        assert resp.text == "<h1>viewer</h1>"
        assert resp.headers["Content-Type"].startswith("text/html")

    def test_asset_content_type(self, site):
        base, _ = site
        resp = requests.get(base + "/app.js")
        assert resp.status_code == 200
        assert resp.headers["Content-Type"].startswith("text/javascript")

    def test_missing_asset(self, site):
        base, _ = site
        assert requests.get(base + "/missing.css").status_code == 404

    def test_path_traversal_blocked(self, site):
        _, port = site
        conn = http.client.HTTPConnection("127.0.0.1", port)
        conn.request("GET", "/../secret.txt")
        resp = conn.getresponse()
        body = resp.read()
        conn.close()
        assert resp.status == 404
        assert b"keep out" not in body

    def test_api_only_mode(self, api):
        base, _ = api
        resp = requests.get(base + "/")
        assert resp.status_code == 404
        assert resp.json()["error"] == "NoFrontend"
