import { describe, expect, it } from "vitest";
import { parsePly, PlyError, SH_C0 } from "../src/ply.js";
import {
  buildPly, splatRow, POINT_PROPS, SPLAT_PROPS, type Prop,
} from "./helpers.js";

describe("splat layout", () => {
  it("reads positions and converts dc coefficients to display color", () => {
    const buf = buildPly(SPLAT_PROPS, [
      splatRow(1, 2, 3, [0, 0.5, -0.5]),
      splatRow(-1, 0, 4.5, [2, 0, -2]),
    ]);
    const cloud = parsePly(buf);
    expect(cloud.kind).toBe("splat");
    expect(cloud.count).toBe(2);
    expect(Array.from(cloud.positions.slice(0, 3))).toEqual([1, 2, 3]);
    expect(cloud.positions[5]).toBeCloseTo(4.5, 6);
    expect(cloud.colors[0]).toBeCloseTo(0.5, 6);
    expect(cloud.colors[1]).toBeCloseTo(0.5 + SH_C0 * 0.5, 6);
    expect(cloud.colors[2]).toBeCloseTo(0.5 - SH_C0 * 0.5, 6);
    // out-of-range coefficients clamp instead of wrapping
    expect(cloud.colors[3]).toBe(1);
    expect(cloud.colors[5]).toBe(0);
  });

  it("tolerates permuted property order and extra properties", () => {
    const props: Prop[] = [
      ["float", "opacity"], ["float", "f_dc_2"], ["float", "z"],
      ["float", "f_dc_0"], ["float", "x"], ["float", "nx"],
      ["float", "f_dc_1"], ["float", "y"], ["uchar", "flags"],
    ];
    const buf = buildPly(props, [[0.9, 0.3, 3, 0.1, 1, 99, 0.2, 2, 7]]);
    const cloud = parsePly(buf);
    expect(cloud.kind).toBe("splat");
    expect(Array.from(cloud.positions)).toEqual([1, 2, 3]);
    expect(cloud.colors[0]).toBeCloseTo(0.5 + SH_C0 * 0.1, 6);
    expect(cloud.colors[2]).toBeCloseTo(0.5 + SH_C0 * 0.3, 6);
  });

  it("rejects non-float dc properties", () => {
    const props: Prop[] = [
      ["float", "x"], ["float", "y"], ["float", "z"],
      ["uchar", "f_dc_0"], ["uchar", "f_dc_1"], ["uchar", "f_dc_2"],
    ];
    const buf = buildPly(props, [[0, 0, 0, 1, 2, 3]]);
    expect(() => parsePly(buf)).toThrow(/f_dc_0 must be float/);
  });
});

describe("point layout", () => {
  it("reads uchar colors as [0, 1]", () => {
    const buf = buildPly(POINT_PROPS, [
      [0, 1, 2, 255, 0, 128],
      [3, 4, 5, 10, 20, 30],
    ]);
    const cloud = parsePly(buf);
    expect(cloud.kind).toBe("points");
    expect(cloud.count).toBe(2);
    expect(Array.from(cloud.positions.slice(3))).toEqual([3, 4, 5]);
    expect(cloud.colors[0]).toBe(1);
    expect(cloud.colors[1]).toBe(0);
    expect(cloud.colors[2]).toBeCloseTo(128 / 255, 6);
  });

  it("rejects float rgb properties", () => {
    const props: Prop[] = [
      ["float", "x"], ["float", "y"], ["float", "z"],
      ["float", "red"], ["float", "green"], ["float", "blue"],
    ];
    const buf = buildPly(props, [[0, 0, 0, 1, 1, 1]]);
    expect(() => parsePly(buf)).toThrow(/red must be uchar/);
  });

  it("accepts an empty cloud", () => {
    const cloud = parsePly(buildPly(POINT_PROPS, []));
    expect(cloud.count).toBe(0);
    expect(cloud.positions.length).toBe(0);
  });
});

describe("malformed input", () => {
  it("rejects non-PLY bytes", () => {
    const buf = new TextEncoder().encode("hello\nend_header\n").buffer;
    expect(() => parsePly(buf as ArrayBuffer)).toThrow(PlyError);
    expect(() => parsePly(buf as ArrayBuffer)).toThrow(/not a PLY file/);
  });

  it("rejects ascii format", () => {
    const head = "ply\nformat ascii 1.0\nelement vertex 0\n" +
      "property float x\nproperty float y\nproperty float z\nend_header\n";
    expect(() => parsePly(buildPly([], [], head)))
      .toThrow(/only binary_little_endian 1.0/);
  });

  it("rejects list properties", () => {
    const head = "ply\nformat binary_little_endian 1.0\n" +
      "element vertex 1\nproperty list uchar int vertex_indices\nend_header\n";
    expect(() => parsePly(buildPly([], [], head)))
      .toThrow(/list properties/);
  });

  it("reports truncated bodies with byte counts", () => {
    const full = buildPly(POINT_PROPS, [[0, 0, 0, 1, 2, 3], [1, 1, 1, 4, 5, 6]]);
    const cut = full.slice(0, full.byteLength - 5);
    expect(() => parsePly(cut)).toThrow(/truncated: need 30 bytes/);
  });

  it("rejects clouds without any color properties", () => {
    const props: Prop[] = [["float", "x"], ["float", "y"], ["float", "z"]];
    const buf = buildPly(props, [[0, 0, 0]]);
    expect(() => parsePly(buf)).toThrow(/no color properties/);
  });

  it("keeps the session-visible error type for other elements", () => {
    const head = "ply\nformat binary_little_endian 1.0\n" +
      "element face 3\nproperty float x\nend_header\n";
    expect(() => parsePly(buildPly([], [], head)))
      .toThrow(/only a vertex element/);
  });
});
