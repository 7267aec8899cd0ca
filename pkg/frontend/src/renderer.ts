/** Hand-rolled WebGL1 point renderer. Splats are drawn as round
 * points: enough to judge geometry and pick viewpoints, nowhere near a
 * faithful splat rasterization, which stays the engine's job.
 */

import type { Cloud } from "./ply.js";
import type { Intrinsics } from "./poses.js";
import { rigidInverse, toGlColumns, pinholeProjection, type Vec3 } from "./camera.js";

const VERT = `
attribute vec3 aPos;
attribute vec3 aColor;
uniform mat4 uView;
uniform mat4 uProj;
uniform float uPointScale;
uniform float uNear;
uniform float uFar;
uniform float uDepthMode;
varying vec3 vColor;

vec3 depthRamp(float t) {
  // blue -> green -> red over [0, 1]
  vec3 a = mix(vec3(0.2, 0.3, 1.0), vec3(0.2, 1.0, 0.3), clamp(t * 2.0, 0.0, 1.0));
  return mix(a, vec3(1.0, 0.25, 0.2), clamp(t * 2.0 - 1.0, 0.0, 1.0));
}

void main() {
  vec4 cam = uView * vec4(aPos, 1.0);
  gl_Position = uProj * cam;
  float z = max(cam.z, 1e-4);
  gl_PointSize = clamp(uPointScale / z, 1.5, 24.0);
  if (uDepthMode > 0.5) {
    float t = clamp((z - uNear) / (uFar - uNear), 0.0, 1.0);
    vColor = depthRamp(t);
  } else {
    vColor = aColor;
  }
}
`;

const FRAG = `
precision mediump float;
varying vec3 vColor;

void main() {
  vec2 d = gl_PointCoord - vec2(0.5);
  if (dot(d, d) > 0.25) discard;
  gl_FragColor = vec4(vColor, 1.0);
}
`;

function compile(gl: WebGLRenderingContext, kind: number, src: string): WebGLShader {
  const shader = gl.createShader(kind);
  if (!shader) throw new Error("shader allocation failed");
  gl.shaderSource(shader, src);
  gl.compileShader(shader);
  if (!gl.getShaderParameter(shader, gl.COMPILE_STATUS)) {
    throw new Error(`shader compile failed: ${gl.getShaderInfoLog(shader)}`);
  }
  return shader;
}

export interface Bounds {
  center: Vec3;
  radius: number;
}

export class PointRenderer {
  private gl: WebGLRenderingContext;
  private program: WebGLProgram;
  private posBuf: WebGLBuffer;
  private colorBuf: WebGLBuffer;
  private count = 0;
  private loc: {
    aPos: number; aColor: number;
    uView: WebGLUniformLocation; uProj: WebGLUniformLocation;
    uPointScale: WebGLUniformLocation; uNear: WebGLUniformLocation;
    uFar: WebGLUniformLocation; uDepthMode: WebGLUniformLocation;
  };
  bounds: Bounds = { center: [0, 0, 0], radius: 1 };

  constructor(private canvas: HTMLCanvasElement) {
    const gl = canvas.getContext("webgl", { antialias: true });
    if (!gl) throw new Error("WebGL unavailable");
    this.gl = gl;
    const program = gl.createProgram();
    if (!program) throw new Error("program allocation failed");
    gl.attachShader(program, compile(gl, gl.VERTEX_SHADER, VERT));
    gl.attachShader(program, compile(gl, gl.FRAGMENT_SHADER, FRAG));
    gl.linkProgram(program);
    if (!gl.getProgramParameter(program, gl.LINK_STATUS)) {
      throw new Error(`program link failed: ${gl.getProgramInfoLog(program)}`);
    }
    this.program = program;
    const buf = () => {
      const b = gl.createBuffer();
      if (!b) throw new Error("buffer allocation failed");
      return b;
    };
    this.posBuf = buf();
    this.colorBuf = buf();
    const uni = (name: string) => {
      const u = gl.getUniformLocation(program, name);
      if (!u) throw new Error(`missing uniform ${name}`);
      return u;
    };
    this.loc = {
      aPos: gl.getAttribLocation(program, "aPos"),
      aColor: gl.getAttribLocation(program, "aColor"),
      uView: uni("uView"),
      uProj: uni("uProj"),
      uPointScale: uni("uPointScale"),
      uNear: uni("uNear"),
      uFar: uni("uFar"),
      uDepthMode: uni("uDepthMode"),
    };
    gl.enable(gl.DEPTH_TEST);
    gl.clearColor(0.07, 0.07, 0.09, 1.0);
  }

  setCloud(cloud: Cloud | null): void {
    const gl = this.gl;
    if (!cloud || cloud.count === 0) {
      this.count = 0;
      this.bounds = { center: [0, 0, 0], radius: 1 };
      return;
    }
    gl.bindBuffer(gl.ARRAY_BUFFER, this.posBuf);
    gl.bufferData(gl.ARRAY_BUFFER, cloud.positions, gl.STATIC_DRAW);
    gl.bindBuffer(gl.ARRAY_BUFFER, this.colorBuf);
    gl.bufferData(gl.ARRAY_BUFFER, cloud.colors, gl.STATIC_DRAW);
    this.count = cloud.count;

    const lo = [Infinity, Infinity, Infinity];
    const hi = [-Infinity, -Infinity, -Infinity];
    for (let i = 0; i < cloud.count; i++) {
      for (let k = 0; k < 3; k++) {
        const v = cloud.positions[3 * i + k];
        if (v < lo[k]) lo[k] = v;
        if (v > hi[k]) hi[k] = v;
      }
    }
    const center: Vec3 = [
      (lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2,
    ];
    const radius = Math.max(
      Math.hypot(hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]) / 2, 1e-3);
    this.bounds = { center, radius };
  }

  draw(camToWorld: number[], intr: Intrinsics, depthMode: boolean): void {
    const gl = this.gl;
    const w = this.canvas.clientWidth || this.canvas.width;
    const h = this.canvas.clientHeight || this.canvas.height;
    const dpr = window.devicePixelRatio || 1;
    if (this.canvas.width !== Math.round(w * dpr) ||
        this.canvas.height !== Math.round(h * dpr)) {
      this.canvas.width = Math.round(w * dpr);
      this.canvas.height = Math.round(h * dpr);
    }
    gl.viewport(0, 0, this.canvas.width, this.canvas.height);
    gl.clear(gl.COLOR_BUFFER_BIT | gl.DEPTH_BUFFER_BIT);
    if (this.count === 0) return;

    const r = this.bounds.radius;
    const near = Math.max(r / 500, 1e-3);
    const far = r * 40;
    // Scale the capture intrinsics to the live canvas so the on-screen
    // framing matches what the engine will render for a saved pose.
    const scaled: Intrinsics = {
      fx: intr.fx * (w / intr.width),
      fy: intr.fy * (h / intr.height),
      cx: intr.cx * (w / intr.width),
      cy: intr.cy * (h / intr.height),
      width: w, height: h,
    };
    gl.useProgram(this.program);
    gl.uniformMatrix4fv(this.loc.uView, false, toGlColumns(rigidInverse(camToWorld)));
    gl.uniformMatrix4fv(this.loc.uProj, false,
                        toGlColumns(pinholeProjection(scaled, near, far)));
    // point spacing for a surface-ish cloud is about 2r / sqrt(n)
    gl.uniform1f(this.loc.uPointScale,
                 (scaled.fy * 2 * r) / Math.sqrt(this.count));
    gl.uniform1f(this.loc.uNear, near);
    gl.uniform1f(this.loc.uFar, r * 4);
    gl.uniform1f(this.loc.uDepthMode, depthMode ? 1 : 0);

    gl.bindBuffer(gl.ARRAY_BUFFER, this.posBuf);
    gl.enableVertexAttribArray(this.loc.aPos);
    gl.vertexAttribPointer(this.loc.aPos, 3, gl.FLOAT, false, 0, 0);
    gl.bindBuffer(gl.ARRAY_BUFFER, this.colorBuf);
    gl.enableVertexAttribArray(this.loc.aColor);
    gl.vertexAttribPointer(this.loc.aColor, 3, gl.FLOAT, false, 0, 0);
    gl.drawArrays(gl.POINTS, 0, this.count);
  }
}
