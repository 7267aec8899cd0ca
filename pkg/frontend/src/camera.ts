/** Camera math matching the engine's conventions bit-for-bit in
 * structure: cam_to_world is row-major 4x4 whose columns are
 * [right, down, forward, position]. Camera space is x right, y DOWN,
 * z forward, projecting through u = fx*x/z + cx, v = fy*y/z + cy.
 */

import type { Intrinsics } from "./poses.js";

export type Vec3 = [number, number, number];

export function add(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

export function scale(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}

export function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

export function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

export function normalize(a: Vec3): Vec3 {
  const n = norm(a);
  if (n === 0) throw new Error("cannot normalize zero vector");
  return scale(a, 1 / n);
}

/** Row-major 4x4 product a*b. */
export function matMul(a: number[], b: number[]): number[] {
  const out = new Array<number>(16).fill(0);
  for (let i = 0; i < 4; i++) {
    for (let j = 0; j < 4; j++) {
      let acc = 0;
      for (let k = 0; k < 4; k++) acc += a[4 * i + k] * b[4 * k + j];
      out[4 * i + j] = acc;
    }
  }
  return out;
}

/** Invert a rigid transform by transposing R and reprojecting t. */
export function rigidInverse(m: number[]): number[] {
  const out = new Array<number>(16).fill(0);
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) out[4 * i + j] = m[4 * j + i];
    out[4 * i + 3] = -(
      m[3] * m[4 * 0 + i] + m[7] * m[4 * 1 + i] + m[11] * m[4 * 2 + i]
    );
  }
  out[15] = 1;
  return out;
}

export function position(m: number[]): Vec3 {
  return [m[3], m[7], m[11]];
}

/** Column k of the rotation block: 0 right, 1 down, 2 forward. */
export function axis(m: number[], k: number): Vec3 {
  return [m[k], m[4 + k], m[8 + k]];
}

/** Build cam_to_world looking from position at target.
 *
 * The default up points along -y because world y grows downward; the
 * engine builds its poses the same way, so matrices round trip.
 */
export function lookAt(
  pos: Vec3, target: Vec3, up: Vec3 = [0, -1, 0],
): number[] {
  const fwd = normalize(sub(target, pos));
  const right = normalize(cross(scale(up, -1), fwd));
  const down = cross(fwd, right);
  return [
    right[0], down[0], fwd[0], pos[0],
    right[1], down[1], fwd[1], pos[1],
    right[2], down[2], fwd[2], pos[2],
    0, 0, 0, 1,
  ];
}

/** Keep pitch off the poles so lookAt never sees a degenerate up. */
export const PITCH_LIMIT = 1.49;

export function clampPitch(pitch: number): number {
  return Math.min(PITCH_LIMIT, Math.max(-PITCH_LIMIT, pitch));
}

/** Forward direction for yaw/pitch. yaw 0, pitch 0 looks along +z;
 * positive pitch looks up (toward -y).
 */
export function anglesForward(yaw: number, pitch: number): Vec3 {
  const c = Math.cos(pitch);
  return [c * Math.sin(yaw), -Math.sin(pitch), c * Math.cos(yaw)];
}

export interface OrbitState {
  target: Vec3;
  distance: number;
  yaw: number;
  pitch: number;
}

export function orbitCamToWorld(s: OrbitState): number[] {
  const fwd = anglesForward(s.yaw, s.pitch);
  const eye = sub(s.target, scale(fwd, s.distance));
  return lookAt(eye, s.target);
}

/** Recover an orbit around `target` from an arbitrary rigid pose. The
 * reconstructed state reproduces the view direction, not the eye, so
 * the camera snaps onto the orbit sphere.
 */
export function orbitFromCamToWorld(
  m: number[], target: Vec3, distance: number,
): OrbitState {
  const fwd = axis(m, 2);
  return {
    target,
    distance,
    yaw: Math.atan2(fwd[0], fwd[2]),
    pitch: clampPitch(Math.asin(-fwd[1])),
  };
}

export interface FlyState {
  position: Vec3;
  yaw: number;
  pitch: number;
}

export function flyCamToWorld(s: FlyState): number[] {
  const fwd = anglesForward(s.yaw, s.pitch);
  return lookAt(s.position, add(s.position, fwd));
}

/** Move in camera axes: delta = [right, down, forward] amounts. */
export function flyMove(s: FlyState, delta: Vec3): FlyState {
  const m = flyCamToWorld(s);
  let pos = s.position;
  pos = add(pos, scale(axis(m, 0), delta[0]));
  pos = add(pos, scale(axis(m, 1), delta[1]));
  pos = add(pos, scale(axis(m, 2), delta[2]));
  return { position: pos, yaw: s.yaw, pitch: s.pitch };
}

export function flyFromCamToWorld(m: number[]): FlyState {
  const fwd = axis(m, 2);
  return {
    position: position(m),
    yaw: Math.atan2(fwd[0], fwd[2]),
    pitch: clampPitch(Math.asin(-fwd[1])),
  };
}

/** Row-major clip-from-camera matrix for a pinhole camera.
 *
 * Camera y points down but NDC y points up, hence the sign flip in the
 * second row. Principal point offsets land in the third column so the
 * image center maps where the intrinsics say, not to the canvas center.
 */
export function pinholeProjection(
  intr: Intrinsics, near: number, far: number,
): number[] {
  const { fx, fy, cx, cy, width: w, height: h } = intr;
  return [
    (2 * fx) / w, 0, (2 * cx) / w - 1, 0,
    0, (-2 * fy) / h, 1 - (2 * cy) / h, 0,
    0, 0, (far + near) / (far - near), (-2 * far * near) / (far - near),
    0, 0, 1, 0,
  ];
}

/** Repack a row-major 4x4 into the column-major layout GL expects. */
export function toGlColumns(m: number[]): Float32Array {
  const out = new Float32Array(16);
  for (let i = 0; i < 4; i++) {
    for (let j = 0; j < 4; j++) out[4 * j + i] = m[4 * i + j];
  }
  return out;
}
