/** Pose trajectory file: the same JSON document the engine reads and
 * writes. Everything captured in the viewer passes this validation
 * before it is allowed anywhere near the server.
 */

export const POSE_ROLES = ["ref", "aux", "train", "eval"] as const;
export type PoseRole = (typeof POSE_ROLES)[number];

export interface Intrinsics {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
}

export interface Pose extends Intrinsics {
  id: string;
  role: PoseRole;
  /** row-major 4x4 cam_to_world, 16 entries */
  camToWorld: number[];
}

export class PoseFileError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "PoseFileError";
  }
}

/** Same bound the engine applies when it checks rigidity. */
export const RIGID_TOL = 1e-6;

/** Returns a description of what is wrong, or null for a rigid matrix. */
export function rigidProblem(m: number[]): string | null {
  if (m.length !== 16) return `matrix has ${m.length} entries, needs 16`;
  if (!m.every(Number.isFinite)) return "matrix contains non-finite values";
  const bottom = [0, 0, 0, 1];
  for (let k = 0; k < 4; k++) {
    if (Math.abs(m[12 + k] - bottom[k]) > RIGID_TOL) {
      return "bottom row must be [0, 0, 0, 1]";
    }
  }
  // r[i][j] = m[4i + j]; check R * R^T against identity
  let worst = 0;
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let dot = 0;
      for (let k = 0; k < 3; k++) dot += m[4 * i + k] * m[4 * j + k];
      worst = Math.max(worst, Math.abs(dot - (i === j ? 1 : 0)));
    }
  }
  if (worst > RIGID_TOL) return "rotation block is not orthonormal";
  const det =
    m[0] * (m[5] * m[10] - m[6] * m[9]) -
    m[1] * (m[4] * m[10] - m[6] * m[8]) +
    m[2] * (m[4] * m[9] - m[5] * m[8]);
  if (Math.abs(det - 1) > RIGID_TOL) return "rotation block must have det +1";
  return null;
}

function checkIntrinsics(pose: Pose, label: string): void {
  const { fx, fy, cx, cy, width, height } = pose;
  if (!(Number.isFinite(fx) && fx > 0) || !(Number.isFinite(fy) && fy > 0)) {
    throw new PoseFileError(`${label}: focal lengths must be positive`);
  }
  if (!Number.isFinite(cx) || !Number.isFinite(cy)) {
    throw new PoseFileError(`${label}: principal point must be finite`);
  }
  if (!Number.isInteger(width) || width <= 0 ||
      !Number.isInteger(height) || height <= 0) {
    throw new PoseFileError(`${label}: width/height must be positive integers`);
  }
}

/** Engine-equivalent validation; throws PoseFileError, returns its input. */
export function validatePoses(poses: Pose[]): Pose[] {
  if (poses.length === 0) {
    throw new PoseFileError("pose file must contain at least one pose");
  }
  const seen = new Set<string>();
  let refs = 0;
  for (const pose of poses) {
    if (typeof pose.id !== "string" || pose.id.length === 0) {
      throw new PoseFileError("every pose needs a nonempty string id");
    }
    const label = `pose ${JSON.stringify(pose.id)}`;
    if (seen.has(pose.id)) throw new PoseFileError(`duplicate ${label}`);
    seen.add(pose.id);
    if (!POSE_ROLES.includes(pose.role)) {
      throw new PoseFileError(
        `${label}: role must be one of ${POSE_ROLES.join(", ")}`);
    }
    if (pose.role === "ref") refs += 1;
    checkIntrinsics(pose, label);
    const problem = rigidProblem(pose.camToWorld);
    if (problem !== null) throw new PoseFileError(`${label}: ${problem}`);
  }
  if (refs !== 1) {
    throw new PoseFileError(
      `exactly one pose must have role 'ref', found ${refs}`);
  }
  return poses;
}

function numberField(entry: Record<string, unknown>, key: string,
                     label: string): number {
  const value = entry[key];
  if (typeof value !== "number") {
    throw new PoseFileError(`${label}: ${key} must be a number`);
  }
  return value;
}

/** Parse and validate a trajectory document. */
export function parsePoseFile(text: string): Pose[] {
  let doc: unknown;
  try {
    doc = JSON.parse(text);
  } catch (exc) {
    throw new PoseFileError(`invalid JSON: ${(exc as Error).message}`);
  }
  if (typeof doc !== "object" || doc === null ||
      !Array.isArray((doc as Record<string, unknown>).poses)) {
    throw new PoseFileError('top level must be {"poses": [...]}');
  }
  const out: Pose[] = [];
  const entries = (doc as { poses: unknown[] }).poses;
  for (let ix = 0; ix < entries.length; ix++) {
    const entry = entries[ix];
    const label = `pose ${ix}`;
    if (typeof entry !== "object" || entry === null || Array.isArray(entry)) {
      throw new PoseFileError(`${label}: entry must be an object`);
    }
    const rec = entry as Record<string, unknown>;
    if (typeof rec.id !== "string") {
      throw new PoseFileError(`${label}: id must be a string`);
    }
    if (typeof rec.role !== "string") {
      throw new PoseFileError(`${label}: role must be a string`);
    }
    const mat = rec.cam_to_world;
    if (!Array.isArray(mat) || mat.length !== 16 ||
        !mat.every((v) => typeof v === "number")) {
      throw new PoseFileError(`${label}: cam_to_world must hold 16 numbers`);
    }
    out.push({
      id: rec.id,
      role: rec.role as PoseRole,
      camToWorld: mat.slice() as number[],
      fx: numberField(rec, "fx", label),
      fy: numberField(rec, "fy", label),
      cx: numberField(rec, "cx", label),
      cy: numberField(rec, "cy", label),
      width: numberField(rec, "width", label),
      height: numberField(rec, "height", label),
    });
  }
  return validatePoses(out);
}

/** Validate then serialize; the output is exactly what gets POSTed. */
export function serializePoseFile(poses: Pose[]): string {
  validatePoses(poses);
  const entries = poses.map((p) => ({
    id: p.id,
    role: p.role,
    cam_to_world: p.camToWorld,
    fx: p.fx, fy: p.fy, cx: p.cx, cy: p.cy,
    width: p.width, height: p.height,
  }));
  return JSON.stringify({ poses: entries }, null, 2) + "\n";
}
