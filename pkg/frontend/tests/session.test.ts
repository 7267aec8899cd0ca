import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";
import { ApiError, type Api, type SceneResponse } from "../src/api.js";
import { lookAt, orbitCamToWorld } from "../src/camera.js";
import { parsePoseFile } from "../src/poses.js";
import { DEFAULT_INTRINSICS, ViewerSession } from "../src/session.js";
import { buildPly, splatRow, POINT_PROPS, SPLAT_PROPS } from "./helpers.js";

class FakeApi implements Api {
  scene: SceneResponse | Error = { bytes: null, stage: null };
  posesText: string | null | Error = null;
  posted: string[] = [];
  postError: Error | null = null;

  async fetchScene(): Promise<SceneResponse> {
    if (this.scene instanceof Error) throw this.scene;
    return this.scene;
  }

  async fetchPoses(): Promise<string | null> {
    if (this.posesText instanceof Error) throw this.posesText;
    return this.posesText;
  }

  async postPoses(body: string): Promise<void> {
    if (this.postError) throw this.postError;
    this.posted.push(body);
  }
}

function sceneBytes(): ArrayBuffer {
  return buildPly(SPLAT_PROPS, [
    splatRow(0, 0, 2, [0, 0, 0]),
    splatRow(1, 0, 3, [1, 0, 0]),
    splatRow(0, 1, 4, [0, 1, 0]),
  ]);
}

const ENGINE_POSES = readFileSync(
  new URL("./fixtures/engine-poses.json", import.meta.url), "utf8");

function ready(): { api: FakeApi; session: ViewerSession } {
  const api = new FakeApi();
  api.scene = { bytes: sceneBytes(), stage: "refine" };
  const session = new ViewerSession(api);
  return { api, session };
}

describe("scene loading", () => {
  it("loads a splat scene and reports its stage", async () => {
    const { session } = ready();
    await session.loadScene();
    expect(session.state).toBe("ready");
    expect(session.stage).toBe("refine");
    expect(session.cloud?.count).toBe(3);
    expect(session.error).toBeNull();
  });

  it("treats a missing scene as the explicit empty state", async () => {
    const session = new ViewerSession(new FakeApi());
    await session.loadScene();
    expect(session.state).toBe("empty");
    expect(session.cloud).toBeNull();
    expect(session.error).toBeNull();
  });

  it("surfaces fetch failures and recovers on retry", async () => {
    const api = new FakeApi();
    api.scene = new Error("connection refused");
    const session = new ViewerSession(api);
    await session.loadScene();
    expect(session.state).toBe("failed");
    expect(session.error).toMatch(/connection refused/);

    api.scene = { bytes: sceneBytes(), stage: "init" };
    await session.loadScene();
    expect(session.state).toBe("ready");
    expect(session.error).toBeNull();
    expect(session.cloud?.count).toBe(3);
  });

  it("keeps the previous cloud when a reload parses badly", async () => {
    const { api, session } = ready();
    await session.loadScene();
    const good = session.cloud;

    api.scene = {
      bytes: new TextEncoder().encode("junk").buffer as ArrayBuffer,
      stage: "refine",
    };
    await session.loadScene();
    expect(session.error).toMatch(/parse failed/);
    expect(session.state).toBe("ready");
    expect(session.cloud).toBe(good);
  });

  it("reads point clouds too", async () => {
    const api = new FakeApi();
    api.scene = {
      bytes: buildPly(POINT_PROPS, [[0, 0, 1, 255, 255, 255]]),
      stage: "init",
    };
    const session = new ViewerSession(api);
    await session.loadScene();
    expect(session.cloud?.kind).toBe("points");
  });
});

describe("pose seeding", () => {
  it("adopts the ref camera's intrinsics from the server file", async () => {
    const { api, session } = ready();
    api.posesText = ENGINE_POSES;
    await session.loadPoses();
    expect(session.poses).toHaveLength(3);
    expect(session.captureIntrinsics.fx).toBe(460.8);
    expect(session.captureIntrinsics.width).toBe(512);
    expect(session.dirty).toBe(false);
  });

  it("starts empty when the server has no poses", async () => {
    const { session } = ready();
    await session.loadPoses();
    expect(session.poses).toEqual([]);
    expect(session.captureIntrinsics).toEqual(DEFAULT_INTRINSICS);
  });
});

describe("capture", () => {
  const M = lookAt([0, 0, 0.2], [0, 0, 4]);

  it("assigns roles, fresh ids, and the capture intrinsics", () => {
    const { session } = ready();
    const ref = session.capture("ref", M);
    expect(typeof ref).not.toBe("string");
    const train = session.capture("train", M);
    if (typeof ref === "string" || typeof train === "string") throw new Error();
    expect(ref.id).toBe("ref");
    expect(ref.role).toBe("ref");
    expect(train.id).toBe("train1");
    expect(train.fx).toBe(DEFAULT_INTRINSICS.fx);
    expect(session.dirty).toBe(true);
  });

  it("blocks a second ref client-side", () => {
    const { session } = ready();
    session.capture("ref", M);
    const second = session.capture("ref", M);
    expect(second).toMatch(/'ref' pose is already captured/);
    expect(session.poses).toHaveLength(1);
  });

  it("never collides ids with server-seeded poses", async () => {
    const { api, session } = ready();
    api.posesText = ENGINE_POSES; // holds ref, aux1, train1
    await session.loadPoses();
    const second = session.capture("ref", M);
    expect(second).toMatch(/already captured/);
    const train = session.capture("train", M);
    if (typeof train === "string") throw new Error(train);
    expect(train.id).toBe("train2");
    const aux = session.capture("aux", M);
    if (typeof aux === "string") throw new Error(aux);
    expect(aux.id).toBe("aux2");
  });

  it("refuses non-rigid matrices before they reach the pose list", () => {
    const { session } = ready();
    const bad = M.slice();
    bad[0] = 3;
    const result = session.capture("train", bad);
    expect(result).toMatch(/not orthonormal/);
    expect(session.poses).toHaveLength(0);
    expect(session.dirty).toBe(false);
  });

  it("removes poses by id", () => {
    const { session } = ready();
    session.capture("ref", M);
    session.capture("train", M);
    session.remove("train1");
    expect(session.poses.map((p) => p.id)).toEqual(["ref"]);
    session.remove("nope");
    expect(session.poses).toHaveLength(1);
  });
});

describe("save", () => {
  const M = lookAt([0, 0, 0.2], [0, 0, 4]);

  it("rejects saving zero poses", async () => {
    const { session } = ready();
    await expect(session.save()).rejects.toThrow(/at least one|nothing to save/);
  });

  it("rejects a trajectory without a ref", async () => {
    const { session } = ready();
    session.capture("train", M);
    await expect(session.save()).rejects.toThrow(/exactly one pose/);
  });

  it("POSTs a document the parser round trips losslessly", async () => {
    const { api, session } = ready();
    session.capture("ref", M);
    session.capture("train", orbitCamToWorld(
      { target: [0, 0, 4], distance: 3.8, yaw: 0.45, pitch: -0.2 }));
    session.capture("train", orbitCamToWorld(
      { target: [0, 0, 4], distance: 3.8, yaw: -0.3, pitch: 0.15 }));
    const count = await session.save();
    expect(count).toBe(3);
    expect(session.dirty).toBe(false);
    expect(api.posted).toHaveLength(1);

    const out = parsePoseFile(api.posted[0]);
    expect(out.map((p) => p.role)).toEqual(["ref", "train", "train"]);
    for (let p = 0; p < 3; p++) {
      expect(out[p].fx).toBe(session.poses[p].fx);
      expect(out[p].width).toBe(session.poses[p].width);
      for (let k = 0; k < 16; k++) {
        // numeric equality: JSON.stringify collapses -0 to 0, which is
        // the same value to every consumer of the matrix
        expect(out[p].camToWorld[k] === session.poses[p].camToWorld[k])
          .toBe(true);
      }
    }
  });

  it("propagates server rejections verbatim", async () => {
    const { api, session } = ready();
    session.capture("ref", M);
    api.postError = new ApiError(
      "pose 'ref': rotation is not orthonormal", "ValidationError", 422);
    await expect(session.save())
      .rejects.toThrow("pose 'ref': rotation is not orthonormal");
    expect(session.dirty).toBe(true); // unsaved changes stay flagged
  });
});

describe("full round trip", () => {
  it("capture, save, reload: matrices agree within 1e-6", async () => {
    const { api, session } = ready();
    const states = [
      { target: [0, 0, 4] as [number, number, number],
        distance: 3.8, yaw: Math.PI, pitch: 0 },
      { target: [0, 0, 4] as [number, number, number],
        distance: 2.5, yaw: 0.8, pitch: 0.3 },
      { target: [0.5, -0.25, 3] as [number, number, number],
        distance: 4.2, yaw: -1.1, pitch: -0.4 },
    ];
    session.capture("ref", orbitCamToWorld(states[0]));
    session.capture("train", orbitCamToWorld(states[1]));
    session.capture("train", orbitCamToWorld(states[2]));
    const saved = session.poses.map((p) => p.camToWorld.slice());
    await session.save();

    const fresh = new ViewerSession(api);
    api.posesText = api.posted[0];
    await fresh.loadPoses();
    expect(fresh.poses).toHaveLength(3);
    for (let p = 0; p < 3; p++) {
      for (let k = 0; k < 16; k++) {
        expect(Math.abs(fresh.poses[p].camToWorld[k] - saved[p][k]))
          .toBeLessThan(1e-6);
      }
    }
  });
});
