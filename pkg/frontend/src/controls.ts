/** Orbit and fly navigation. Orbit is the default: drag rotates about
 * the target, wheel dollies, shift-drag (or right-drag) pans the
 * target. Fly mode is WASD + QE with drag to look.
 */

import {
  add, axis, clampPitch, flyCamToWorld, flyFromCamToWorld, flyMove,
  orbitCamToWorld, orbitFromCamToWorld, position, scale,
  type FlyState, type OrbitState, type Vec3,
} from "./camera.js";

export type Mode = "orbit" | "fly";

const ROTATE_SPEED = 0.006;
const PAN_SPEED = 0.0015;
const DOLLY_BASE = 1.0015;
const FLY_SPEED = 0.9; // scene radii per second at speed 1

export class CameraControls {
  mode: Mode = "orbit";
  private orbit: OrbitState = { target: [0, 0, 0], distance: 3, yaw: 0, pitch: 0 };
  private fly: FlyState = { position: [0, 0, -3], yaw: 0, pitch: 0 };
  private sceneRadius = 1;
  private keys = new Set<string>();
  private dragging = false;
  private panning = false;
  private lastX = 0;
  private lastY = 0;
  /** fires whenever the camera moved and a redraw is wanted */
  onChange: () => void = () => {};

  constructor(private el: HTMLElement) {
    el.addEventListener("mousedown", (e) => {
      this.dragging = true;
      this.panning = e.button === 2 || e.shiftKey;
      this.lastX = e.clientX;
      this.lastY = e.clientY;
    });
    window.addEventListener("mouseup", () => { this.dragging = false; });
    window.addEventListener("mousemove", (e) => this.onMove(e));
    el.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.dolly(DOLLY_BASE ** e.deltaY);
    }, { passive: false });
    el.addEventListener("contextmenu", (e) => e.preventDefault());
    window.addEventListener("keydown", (e) => {
      if ((e.target as HTMLElement).tagName === "INPUT") return;
      this.keys.add(e.key.toLowerCase());
    });
    window.addEventListener("keyup", (e) => this.keys.delete(e.key.toLowerCase()));
    window.addEventListener("blur", () => this.keys.clear());
  }

  camToWorld(): number[] {
    return this.mode === "orbit"
      ? orbitCamToWorld(this.orbit)
      : flyCamToWorld(this.fly);
  }

  /** Frame the scene: orbit target on the center, pulled back enough
   * to see the whole bounding sphere.
   */
  setHome(center: Vec3, radius: number): void {
    this.sceneRadius = radius;
    this.orbit = {
      target: center,
      distance: radius * 2.2,
      yaw: Math.PI, // look back toward -z, the usual entrance direction
      pitch: 0,
    };
    this.fly = flyFromCamToWorld(orbitCamToWorld(this.orbit));
    this.onChange();
  }

  /** Jump the camera onto a saved pose, keeping the current mode. */
  adoptPose(camToWorld: number[]): void {
    this.fly = flyFromCamToWorld(camToWorld);
    this.orbit = orbitFromCamToWorld(
      camToWorld, this.orbit.target,
      Math.max(this.distanceTo(this.orbit.target, camToWorld), 1e-3));
    this.onChange();
  }

  private distanceTo(target: Vec3, m: number[]): number {
    const p = position(m);
    return Math.hypot(p[0] - target[0], p[1] - target[1], p[2] - target[2]);
  }

  setMode(mode: Mode): void {
    if (mode === this.mode) return;
    const current = this.camToWorld();
    this.mode = mode;
    if (mode === "fly") {
      this.fly = flyFromCamToWorld(current);
    } else {
      this.orbit = orbitFromCamToWorld(
        current, this.orbit.target,
        Math.max(this.distanceTo(this.orbit.target, current), 1e-3));
    }
    this.onChange();
  }

  private onMove(e: MouseEvent): void {
    if (!this.dragging) return;
    const dx = e.clientX - this.lastX;
    const dy = e.clientY - this.lastY;
    this.lastX = e.clientX;
    this.lastY = e.clientY;
    if (this.mode === "orbit") {
      if (this.panning) {
        const m = orbitCamToWorld(this.orbit);
        const step = this.orbit.distance * PAN_SPEED;
        let t = this.orbit.target;
        t = add(t, scale(axis(m, 0), -dx * step));
        t = add(t, scale(axis(m, 1), -dy * step));
        this.orbit.target = t;
      } else {
        this.orbit.yaw += dx * ROTATE_SPEED;
        this.orbit.pitch = clampPitch(this.orbit.pitch + dy * ROTATE_SPEED);
      }
    } else {
      this.fly.yaw += dx * ROTATE_SPEED;
      this.fly.pitch = clampPitch(this.fly.pitch - dy * ROTATE_SPEED);
    }
    this.onChange();
  }

  private dolly(factor: number): void {
    if (this.mode === "orbit") {
      this.orbit.distance = Math.max(this.sceneRadius * 0.02,
                                     this.orbit.distance * factor);
    } else {
      this.fly = flyMove(this.fly,
                         [0, 0, (1 - factor) * this.sceneRadius * 2]);
    }
    this.onChange();
  }

  /** Advance fly movement; call once per animation frame. */
  tick(dt: number): void {
    if (this.mode !== "fly" || this.keys.size === 0) return;
    const step = FLY_SPEED * this.sceneRadius * dt;
    let delta: Vec3 = [0, 0, 0];
    if (this.keys.has("w")) delta[2] += step;
    if (this.keys.has("s")) delta[2] -= step;
    if (this.keys.has("d")) delta[0] += step;
    if (this.keys.has("a")) delta[0] -= step;
    if (this.keys.has("q")) delta[1] += step; // down
    if (this.keys.has("e")) delta[1] -= step; // up
    if (delta[0] !== 0 || delta[1] !== 0 || delta[2] !== 0) {
      this.fly = flyMove(this.fly, delta);
      this.onChange();
    }
  }
}
