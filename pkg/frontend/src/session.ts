/** Viewer session state: the loaded cloud, captured poses, and the
 * rules that keep anything we save acceptable to the server. All
 * network and parse failures land in `error` instead of throwing so
 * the UI stays alive and can offer a retry.
 */

import type { Api } from "./api.js";
import { ApiError } from "./api.js";
import { parsePly, type Cloud } from "./ply.js";
import {
  parsePoseFile, serializePoseFile, validatePoses,
  PoseFileError, type Intrinsics, type Pose, type PoseRole,
} from "./poses.js";

export type SceneState = "loading" | "empty" | "ready" | "failed";

/** Matches the engine's reference camera for a 512x512 render. */
export const DEFAULT_INTRINSICS: Intrinsics = {
  fx: 460.8, fy: 460.8, cx: 256, cy: 256, width: 512, height: 512,
};

export class ViewerSession {
  state: SceneState = "loading";
  stage: string | null = null;
  cloud: Cloud | null = null;
  error: string | null = null;
  poses: Pose[] = [];
  /** intrinsics stamped onto newly captured poses */
  captureIntrinsics: Intrinsics = { ...DEFAULT_INTRINSICS };
  /** captures or removals not yet saved */
  dirty = false;

  constructor(private api: Api) {}

  /** Fetch and parse the scene. A parse or network failure keeps any
   * previously loaded cloud so the user does not lose their view.
   */
  async loadScene(): Promise<void> {
    this.state = this.cloud ? "ready" : "loading";
    this.error = null;
    let resp;
    try {
      resp = await this.api.fetchScene();
    } catch (exc) {
      this.error = `scene fetch failed: ${(exc as Error).message}`;
      this.state = this.cloud ? "ready" : "failed";
      return;
    }
    if (resp.bytes === null) {
      this.cloud = null;
      this.stage = null;
      this.state = "empty";
      return;
    }
    try {
      this.cloud = parsePly(resp.bytes);
    } catch (exc) {
      this.error = `scene parse failed: ${(exc as Error).message}`;
      this.state = this.cloud ? "ready" : "failed";
      return;
    }
    this.stage = resp.stage;
    this.state = "ready";
  }

  /** Seed the pose list from the server, adopting the ref camera's
   * intrinsics for future captures. Missing file means empty list.
   */
  async loadPoses(): Promise<void> {
    let text;
    try {
      text = await this.api.fetchPoses();
    } catch (exc) {
      this.error = `pose fetch failed: ${(exc as Error).message}`;
      return;
    }
    if (text === null) {
      this.poses = [];
      this.dirty = false;
      return;
    }
    try {
      this.poses = parsePoseFile(text);
    } catch (exc) {
      this.error = `pose file invalid: ${(exc as Error).message}`;
      return;
    }
    const ref = this.poses.find((p) => p.role === "ref");
    if (ref) {
      const { fx, fy, cx, cy, width, height } = ref;
      this.captureIntrinsics = { fx, fy, cx, cy, width, height };
    }
    this.dirty = false;
  }

  private freshId(role: PoseRole): string {
    const taken = new Set(this.poses.map((p) => p.id));
    if (role === "ref" && !taken.has("ref")) return "ref";
    for (let n = 1; ; n++) {
      const id = `${role}${n}`;
      if (!taken.has(id)) return id;
    }
  }

  /** Capture the current camera as a pose. Returns the new pose, or a
   * human-readable reason the capture was refused.
   */
  capture(role: PoseRole, camToWorld: number[]): Pose | string {
    if (role === "ref" && this.poses.some((p) => p.role === "ref")) {
      return "a 'ref' pose is already captured; remove it first";
    }
    const pose: Pose = {
      id: this.freshId(role),
      role,
      camToWorld: camToWorld.slice(),
      ...this.captureIntrinsics,
    };
    // Validate with a stand-in ref when none exists yet, so captures
    // made before the ref do not trip the exactly-one-ref rule.
    const candidate = [...this.poses, pose];
    const forCheck = candidate.some((p) => p.role === "ref")
      ? candidate
      : [...candidate, {
          id: "__ref__", role: "ref" as PoseRole,
          camToWorld: [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1],
          ...this.captureIntrinsics,
        }];
    try {
      validatePoses(forCheck);
    } catch (exc) {
      return (exc as Error).message;
    }
    this.poses.push(pose);
    this.dirty = true;
    return pose;
  }

  remove(id: string): void {
    const before = this.poses.length;
    this.poses = this.poses.filter((p) => p.id !== id);
    if (this.poses.length !== before) this.dirty = true;
  }

  /** Validate, serialize, and POST the whole trajectory. Throws
   * PoseFileError for local rejections and ApiError when the server
   * refuses; the caller shows either message as is.
   */
  async save(): Promise<number> {
    if (this.poses.length === 0) {
      throw new PoseFileError("nothing to save: capture at least one pose");
    }
    const body = serializePoseFile(this.poses);
    await this.api.postPoses(body);
    this.dirty = false;
    return this.poses.length;
  }
}

export { ApiError, PoseFileError };
